use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ops, Real, Tensor};

use super::plan::{Reconstruction, SharingPlan};
use super::weights::{FusionWeight, FusionWeights, LayerCache};

pub(crate) fn source_cache<T: Real>(
    stored: &BTreeMap<usize, LayerCache<T>>,
    target: usize,
    source: usize,
) -> Result<&LayerCache<T>> {
    stored.get(&source).ok_or(Error::MissingSource {
        target,
        source_layer: source,
    })
}

pub(crate) fn check_lengths<T: Real>(target: usize, caches: &[&LayerCache<T>]) -> Result<()> {
    let lengths: Vec<usize> = caches.iter().map(|c| c.len()).collect();
    let starts: Vec<usize> = caches.iter().map(|c| c.start).collect();
    if lengths.windows(2).any(|w| w[0] != w[1]) || starts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::LengthMismatch { target, lengths });
    }
    Ok(())
}

/// `Σⱼ wⱼ ⊙ xⱼ` with each weight broadcast over the last axis.
pub(crate) fn weighted_sum<T: Real>(terms: &[(&Tensor<T>, &FusionWeight<T>)]) -> Result<Tensor<T>> {
    let (first, _) = terms
        .first()
        .ok_or_else(|| Error::dim("weighted_sum", "no terms"))?;
    let d = first.last_dim();
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for (x, w) in terms {
        let scaled = ops::mul_last(x, &w.expand(d)?)?;
        acc = acc.add(&scaled)?;
    }
    Ok(acc)
}

/// Produces the keys and values of reconstruction layer `layer` from the
/// stored caches of its sources.
pub fn reconstruct<T: Real>(
    plan: &SharingPlan,
    weights: &FusionWeights<T>,
    stored: &BTreeMap<usize, LayerCache<T>>,
    layer: usize,
) -> Result<LayerCache<T>> {
    let rule = plan
        .rule(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} is not a reconstruction layer")))?;
    let caches = rule
        .sources()
        .into_iter()
        .map(|j| source_cache(stored, layer, j))
        .collect::<Result<Vec<_>>>()?;
    check_lengths(layer, &caches)?;
    let start = caches[0].start;

    match rule.kind {
        Reconstruction::DirectReuse => {
            let k = source_cache(stored, layer, rule.key_sources[0])?.k.clone();
            let v = source_cache(stored, layer, rule.value_sources[0])?.v.clone();
            LayerCache::starting_at(layer, k, v, start)
        }
        Reconstruction::WeightedFusion(_) => {
            let missing = |j| Error::Input(format!("no fusion weight for ({layer}, {j})"));
            let key_terms = rule
                .key_sources
                .iter()
                .map(|&j| {
                    let w = weights.key(layer, j).ok_or_else(|| missing(j))?;
                    Ok((&source_cache(stored, layer, j)?.k, w))
                })
                .collect::<Result<Vec<_>>>()?;
            let value_terms = rule
                .value_sources
                .iter()
                .map(|&j| {
                    let w = weights.value(layer, j).ok_or_else(|| missing(j))?;
                    Ok((&source_cache(stored, layer, j)?.v, w))
                })
                .collect::<Result<Vec<_>>>()?;
            LayerCache::starting_at(layer, weighted_sum(&key_terms)?, weighted_sum(&value_terms)?, start)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_sharing::plan::{plan_for_strategy, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caches(layers: &[usize], rng: &mut ChaCha8Rng) -> BTreeMap<usize, LayerCache> {
        layers
            .iter()
            .map(|&l| {
                let k = Tensor::randn([2, 5, 4], 1.0, rng);
                let v = Tensor::randn([2, 5, 4], 1.0, rng);
                (l, LayerCache::new(l, k, v).unwrap())
            })
            .collect()
    }

    #[test]
    fn direct_reuse_is_exact_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = plan_for_strategy(Strategy::FusedKvLite, 4, 2).unwrap();
        let stored = caches(&[1, 2], &mut rng);
        let out = reconstruct(&plan, &FusionWeights::new(4), &stored, 3).unwrap();
        assert_eq!(out.k, stored[&2].k);
        assert_eq!(out.v, stored[&1].v);
    }

    #[test]
    fn one_hot_fusion_selects_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = plan_for_strategy(Strategy::FusedKv, 4, 2).unwrap();
        let stored = caches(&[1, 2], &mut rng);
        let w = FusionWeights::one_hot(&plan, 4, |_| 2);
        let out = reconstruct(&plan, &w, &stored, 4).unwrap();
        assert_eq!(out.k, stored[&2].k);
        assert_eq!(out.v, stored[&2].v);
    }

    #[test]
    fn missing_and_mismatched_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = plan_for_strategy(Strategy::FusedKv, 4, 2).unwrap();
        let w = FusionWeights::unit(&plan, 4);
        let mut stored = caches(&[1], &mut rng);
        assert!(matches!(
            reconstruct(&plan, &w, &stored, 3),
            Err(Error::MissingSource { target: 3, source_layer: 2 })
        ));
        let short = LayerCache::new(2, Tensor::zeros([2, 3, 4]), Tensor::zeros([2, 3, 4])).unwrap();
        stored.insert(2, short);
        assert!(matches!(reconstruct(&plan, &w, &stored, 3), Err(Error::LengthMismatch { .. })));
        assert!(reconstruct(&plan, &w, &stored, 1).is_err());
    }
}
