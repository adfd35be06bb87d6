//! Initialization schemes for fusion weights.
//!
//! * `init_normal` draws every free weight entry from `N(0, 1)`.
//! * The iterative scheme chains reconstruction layers through auxiliary
//!   weights: layer `i > n+1` fuses the previous reconstruction layer's cache
//!   with one anchor.
//! * `init_equivalent` unrolls that chain into standard two-source weights so
//!   that the standard model reproduces the iterative one exactly at
//!   initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::rope::PairSymmetricWeight;

use super::plan::{Granularity, Reconstruction, SharingPlan};
use super::reconstruct::{check_lengths, source_cache, weighted_sum};
use super::weights::{FusionWeight, FusionWeights, LayerCache};

fn sample<T: Real>(rng: &mut ChaCha8Rng, granularity: Granularity, head_dim: usize, key: bool) -> FusionWeight<T> {
    let mut draw = || T::of(StandardNormal.sample(rng));
    match (granularity, key) {
        (Granularity::Scalar, _) => FusionWeight::Scalar(draw()),
        (Granularity::Vector, true) => {
            FusionWeight::PairSymmetric(PairSymmetricWeight::new((0..head_dim / 2).map(|_| draw()).collect()))
        }
        (Granularity::Vector, false) => FusionWeight::Vector((0..head_dim).map(|_| draw()).collect()),
    }
}

/// Standard-normal fusion weights for every fused source of the plan. Key
/// vectors take one draw per RoPE pair.
pub fn init_normal<T: Real>(plan: &SharingPlan, head_dim: usize, seed: u64) -> Result<FusionWeights<T>> {
    if !plan.has_fusion() {
        return Err(Error::Config(format!("{} has no fusion layers", plan.strategy())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = FusionWeights::new(head_dim);
    for rule in plan.rules() {
        let Reconstruction::WeightedFusion(g) = rule.kind else { continue };
        for &j in &rule.key_sources {
            w.set_key(rule.layer, j, sample(&mut rng, g, head_dim, true))?;
        }
        for &j in &rule.value_sources {
            w.set_value(rule.layer, j, sample(&mut rng, g, head_dim, false))?;
        }
    }
    Ok(w)
}

/// Auxiliary weights of the iterative scheme for one reconstruction layer.
///
/// For the first reconstruction layer `n+1` the chain has not started, so
/// `key_prev` multiplies `K¹`, `key_anchor` multiplies `Kⁿ`, `value_prev`
/// multiplies `Vⁿ` and `value_anchor` multiplies `V¹`. For `i > n+1`,
/// `key_prev`/`value_prev` multiply the previous layer's reconstructed cache.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainWeights<T = f64> {
    pub key_prev: FusionWeight<T>,
    pub key_anchor: FusionWeight<T>,
    pub value_prev: FusionWeight<T>,
    pub value_anchor: FusionWeight<T>,
}

/// Chain weights keyed by reconstruction layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryWeights<T = f64> {
    pub head_dim: usize,
    pub layers: BTreeMap<usize, ChainWeights<T>>,
}

impl<T: Real> AuxiliaryWeights<T> {
    pub fn sample_normal(plan: &SharingPlan, head_dim: usize, granularity: Granularity, seed: u64) -> Result<Self> {
        let (_, _) = fused_shape(plan)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = plan
            .reconstruction_layers()
            .into_iter()
            .map(|i| {
                let w = ChainWeights {
                    key_prev: sample(&mut rng, granularity, head_dim, true),
                    key_anchor: sample(&mut rng, granularity, head_dim, true),
                    value_prev: sample(&mut rng, granularity, head_dim, false),
                    value_anchor: sample(&mut rng, granularity, head_dim, false),
                };
                (i, w)
            })
            .collect();
        Ok(AuxiliaryWeights { head_dim, layers })
    }

    fn get(&self, layer: usize) -> Result<&ChainWeights<T>> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Input(format!("no auxiliary weights for layer {layer}")))
    }
}

/// Checks the plan reads `{1, n}` for both caches on contiguous layers
/// `n+1..=L`; returns `(n, L)`.
fn fused_shape(plan: &SharingPlan) -> Result<(usize, usize)> {
    let rec = plan.reconstruction_layers();
    let Some(&first) = rec.first() else {
        return Err(Error::Config("plan has no reconstruction layers".into()));
    };
    let n = first - 1;
    let l = plan.num_layers();
    let shape_ok = n >= 2
        && rec == (n + 1..=l).collect::<Vec<_>>()
        && plan.rules().iter().all(|r| {
            matches!(r.kind, Reconstruction::WeightedFusion(_))
                && r.key_sources == [1, n]
                && r.value_sources == [1, n]
        });
    if !shape_ok {
        return Err(Error::Config(format!(
            "{} is not FusedKV-shaped (sources {{1, n}} on layers n+1..L)",
            plan.strategy()
        )));
    }
    Ok((n, l))
}

/// Standard-form weights whose reconstruction equals [`iterative_reconstruct`]
/// under the same auxiliary weights.
pub fn init_equivalent<T: Real>(plan: &SharingPlan, aux: &AuxiliaryWeights<T>) -> Result<FusionWeights<T>> {
    let (n, l) = fused_shape(plan)?;
    let mut out = FusionWeights::new(aux.head_dim);
    let base = aux.get(n + 1)?;
    let mut a1 = base.key_prev.clone();
    let mut an = base.key_anchor.clone();
    let mut b1 = base.value_anchor.clone();
    let mut bn = base.value_prev.clone();
    for i in n + 1..=l {
        if i > n + 1 {
            let w = aux.get(i)?;
            a1 = w.key_prev.mul(&a1)?;
            an = w.key_prev.mul(&an)?.add(&w.key_anchor)?;
            b1 = w.value_prev.mul(&b1)?.add(&w.value_anchor)?;
            bn = w.value_prev.mul(&bn)?;
        }
        out.set_key(i, 1, a1.clone())?;
        out.set_key(i, n, an.clone())?;
        out.set_value(i, 1, b1.clone())?;
        out.set_value(i, n, bn.clone())?;
    }
    Ok(out)
}

/// Chain-form reconstruction of every layer in `n+1..=L`.
pub fn iterative_reconstruct<T: Real>(
    plan: &SharingPlan,
    aux: &AuxiliaryWeights<T>,
    stored: &BTreeMap<usize, LayerCache<T>>,
) -> Result<BTreeMap<usize, LayerCache<T>>> {
    let (n, l) = fused_shape(plan)?;
    let bottom = source_cache(stored, n + 1, 1)?;
    let middle = source_cache(stored, n + 1, n)?;
    check_lengths(n + 1, &[bottom, middle])?;

    let base = aux.get(n + 1)?;
    let mut k = weighted_sum(&[(&bottom.k, &base.key_prev), (&middle.k, &base.key_anchor)])?;
    let mut v = weighted_sum(&[(&middle.v, &base.value_prev), (&bottom.v, &base.value_anchor)])?;
    let mut out = BTreeMap::new();
    out.insert(n + 1, LayerCache::starting_at(n + 1, k.clone(), v.clone(), bottom.start)?);
    for i in n + 2..=l {
        let w = aux.get(i)?;
        k = weighted_sum(&[(&k, &w.key_prev), (&middle.k, &w.key_anchor)])?;
        v = weighted_sum(&[(&v, &w.value_prev), (&bottom.v, &w.value_anchor)])?;
        out.insert(i, LayerCache::starting_at(i, k.clone(), v.clone(), bottom.start)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_sharing::plan::{plan_for_strategy, Strategy};

    fn scalar(x: f64) -> FusionWeight {
        FusionWeight::Scalar(x)
    }

    fn chain(kp: f64, ka: f64, vp: f64, va: f64) -> ChainWeights {
        ChainWeights {
            key_prev: scalar(kp),
            key_anchor: scalar(ka),
            value_prev: scalar(vp),
            value_anchor: scalar(va),
        }
    }

    #[test]
    fn normal_init_is_deterministic_and_symmetric() {
        let plan = plan_for_strategy(Strategy::FusedKv, 8, 4).unwrap();
        let a: FusionWeights = init_normal(&plan, 8, 42).unwrap();
        let b: FusionWeights = init_normal(&plan, 8, 42).unwrap();
        assert_eq!(a, b);
        for (_, w) in a.keys() {
            let e = w.expand(8).unwrap();
            assert!(e.chunks(2).all(|p| p[0] == p[1]));
        }
        assert!(init_normal::<f64>(&plan_for_strategy(Strategy::Yoco, 8, 4).unwrap(), 8, 1).is_err());
    }

    #[test]
    fn single_layer_equivalent_is_auxiliary() {
        let plan = plan_for_strategy(Strategy::FusedKv, 3, 2).unwrap();
        let aux = AuxiliaryWeights {
            head_dim: 4,
            layers: [(3, chain(0.5, 0.25, -1.0, 2.0))].into_iter().collect(),
        };
        let w = init_equivalent(&plan, &aux).unwrap();
        assert_eq!(w.key(3, 1), Some(&scalar(0.5)));
        assert_eq!(w.key(3, 2), Some(&scalar(0.25)));
        assert_eq!(w.value(3, 2), Some(&scalar(-1.0)));
        assert_eq!(w.value(3, 1), Some(&scalar(2.0)));
    }

    #[test]
    fn hand_unrolled_scalar_toy() {
        // n = 2, L = 4: a'(3,·) = {0.5 on K¹, 0.25 on Kⁿ}, a'(4,3) = 2, a'(4,n) = 1.
        let plan = plan_for_strategy(Strategy::FusedKv, 4, 2).unwrap();
        let aux = AuxiliaryWeights {
            head_dim: 2,
            layers: [(3, chain(0.5, 0.25, 1.0, 1.0)), (4, chain(2.0, 1.0, 1.0, 1.0))]
                .into_iter()
                .collect(),
        };
        let w = init_equivalent(&plan, &aux).unwrap();
        assert_eq!(w.key(4, 2), Some(&scalar(1.5)));
        assert_eq!(w.key(4, 1), Some(&scalar(1.0)));
    }

    #[test]
    fn rejects_non_fused_plans() {
        let plan = plan_for_strategy(Strategy::DenseFusion, 8, 4).unwrap();
        assert!(AuxiliaryWeights::<f64>::sample_normal(&plan, 4, Granularity::Scalar, 0).is_err());
    }
}
