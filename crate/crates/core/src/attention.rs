//! Causal grouped-query attention over layer caches.
//!
//! Query head `h` reads KV head `⌊h / g⌋` with `g = H_q / H_kv`. Visibility
//! is decided by absolute position, so a cache that starts at position `p`
//! and queries at later positions behave the same as a full recompute.

use serde::{Deserialize, Serialize};

use crate::cache_sharing::{FusionWeight, LayerCache};
use crate::error::{Error, Result};
use crate::numerics::{ops, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(q_heads: usize, kv_heads: usize, head_dim: usize) -> Result<Self> {
        if q_heads == 0 || kv_heads == 0 || !q_heads.is_multiple_of(kv_heads) {
            return Err(Error::Config(format!(
                "{q_heads} query heads cannot be grouped over {kv_heads} KV heads"
            )));
        }
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head dim {head_dim} must be even")));
        }
        Ok(AttentionConfig {
            q_heads,
            kv_heads,
            head_dim,
        })
    }

    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    pub fn kv_head_for(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    pub fn scale<T: Real>(&self) -> T {
        T::of(1.0 / (self.head_dim as f64).sqrt())
    }
}

fn check_query<T: Real>(q: &Tensor<T>, cfg: &AttentionConfig, q_positions: &[usize]) -> Result<()> {
    let (h, s, d) = q.dim3("attend")?;
    if h != cfg.q_heads || d != cfg.head_dim {
        return Err(Error::dim(
            "attend",
            format!("query {:?} for {} heads of dim {}", q.shape(), cfg.q_heads, cfg.head_dim),
        ));
    }
    if q_positions.len() != s {
        return Err(Error::dim(
            "attend",
            format!("{} query positions for {s} queries", q_positions.len()),
        ));
    }
    Ok(())
}

fn check_cache<T: Real>(cache: &LayerCache<T>, cfg: &AttentionConfig) -> Result<()> {
    if cache.kv_heads() != cfg.kv_heads || cache.head_dim() != cfg.head_dim {
        return Err(Error::dim(
            "attend",
            format!(
                "cache of layer {} has shape {:?}, expected {} KV heads of dim {}",
                cache.layer,
                cache.k.shape(),
                cfg.kv_heads,
                cfg.head_dim
            ),
        ));
    }
    Ok(())
}

/// Attention of post-RoPE queries `[H_q × s × D]` over one cache.
pub fn attend<T: Real>(
    q: &Tensor<T>,
    cache: &LayerCache<T>,
    cfg: &AttentionConfig,
    q_positions: &[usize],
) -> Result<Tensor<T>> {
    check_query(q, cfg, q_positions)?;
    check_cache(cache, cfg)?;
    let k_positions = cache.positions();
    let mut outs = Vec::with_capacity(cfg.q_heads);
    for h in 0..cfg.q_heads {
        let kvh = cfg.kv_head_for(h);
        let qh = ops::head(q, h)?;
        let scores = ops::matmul_bt(&qh, &ops::head(&cache.k, kvh)?)?;
        let p = ops::masked_softmax(&scores, cfg.scale(), q_positions, &k_positions)?;
        outs.push(ops::matmul(&p, &ops::head(&cache.v, kvh)?)?);
    }
    ops::stack(&outs.iter().collect::<Vec<_>>())
}

/// Attention against a fused cache without materialising it: scores are
/// accumulated source by source as `(a ⊙ q)·kⱼ` and the output as
/// `Σⱼ bⱼ ⊙ (P·Vⱼ)`.
pub fn attend_fused<T: Real>(
    q: &Tensor<T>,
    key_terms: &[(&LayerCache<T>, &FusionWeight<T>)],
    value_terms: &[(&LayerCache<T>, &FusionWeight<T>)],
    cfg: &AttentionConfig,
    q_positions: &[usize],
) -> Result<Tensor<T>> {
    check_query(q, cfg, q_positions)?;
    let first = key_terms
        .first()
        .or(value_terms.first())
        .ok_or_else(|| Error::Input("fused attention needs at least one source".into()))?
        .0;
    if key_terms.is_empty() || value_terms.is_empty() {
        return Err(Error::Input("fused attention needs key and value sources".into()));
    }
    for (c, w) in key_terms.iter().chain(value_terms) {
        check_cache(c, cfg)?;
        if c.len() != first.len() || c.start != first.start {
            return Err(Error::LengthMismatch {
                target: first.layer,
                lengths: key_terms.iter().chain(value_terms).map(|(c, _)| c.len()).collect(),
            });
        }
        w.expand(cfg.head_dim)?;
    }
    for (_, w) in key_terms {
        if !w.is_rope_compatible() {
            return Err(Error::Input("key fusion weights must be pair-symmetric".into()));
        }
    }
    let d = cfg.head_dim;
    let k_positions = first.positions();
    let mut outs = Vec::with_capacity(cfg.q_heads);
    for h in 0..cfg.q_heads {
        let kvh = cfg.kv_head_for(h);
        let qh = ops::head(q, h)?;
        let mut scores: Option<Tensor<T>> = None;
        for (c, w) in key_terms {
            let part = ops::matmul_bt(&ops::mul_last(&qh, &w.expand(d)?)?, &ops::head(&c.k, kvh)?)?;
            scores = Some(match scores {
                Some(s) => s.add(&part)?,
                None => part,
            });
        }
        let scores = scores.expect("at least one key term");
        let p = ops::masked_softmax(&scores, cfg.scale(), q_positions, &k_positions)?;
        let mut out: Option<Tensor<T>> = None;
        for (c, w) in value_terms {
            let part = ops::mul_last(&ops::matmul(&p, &ops::head(&c.v, kvh)?)?, &w.expand(d)?)?;
            out = Some(match out {
                Some(o) => o.add(&part)?,
                None => part,
            });
        }
        outs.push(out.expect("at least one value term"));
    }
    ops::stack(&outs.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar triple-loop reference.
    fn naive(q: &Tensor, cache: &LayerCache, cfg: &AttentionConfig, qpos: &[usize]) -> Tensor {
        let (hq, s, d) = q.dim3("naive").unwrap();
        let t = cache.len();
        let mut out = Tensor::zeros([hq, s, d]);
        for h in 0..hq {
            let kvh = h / (cfg.q_heads / cfg.kv_heads);
            for i in 0..s {
                let mut w = vec![0.0; t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..t {
                    if cache.start + j <= qpos[i] {
                        let mut sc = 0.0;
                        for c in 0..d {
                            sc += q.get(&[h, i, c]) * cache.k.get(&[kvh, j, c]);
                        }
                        w[j] = sc / (d as f64).sqrt();
                        max = max.max(w[j]);
                    } else {
                        w[j] = f64::NEG_INFINITY;
                    }
                }
                let z: f64 = w.iter().map(|x| (x - max).exp()).sum();
                for j in 0..t {
                    let p = (w[j] - max).exp() / z;
                    for c in 0..d {
                        let cur = out.get(&[h, i, c]);
                        out.set(&[h, i, c], cur + p * cache.v.get(&[kvh, j, c]));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttentionConfig::new(4, 2, 4).unwrap();
        let q = Tensor::<f64>::randn([4, 1, 4], 1.0, &mut rng);
        let cache = LayerCache::new(1, Tensor::randn([2, 1, 4], 1.0, &mut rng), Tensor::randn([2, 1, 4], 1.0, &mut rng)).unwrap();
        let out = attend(&q, &cache, &cfg, &[0]).unwrap();
        for h in 0..4 {
            assert_eq!(ops::head(&out, h).unwrap().data(), ops::head(&cache.v, h / 2).unwrap().data());
        }
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttentionConfig::new(4, 2, 6).unwrap();
        let q = Tensor::randn([4, 2, 6], 1.0, &mut rng);
        let cache = LayerCache::new(1, Tensor::randn([2, 2, 6], 1.0, &mut rng), Tensor::randn([2, 2, 6], 1.0, &mut rng)).unwrap();
        let out = attend(&q, &cache, &cfg, &[0, 1]).unwrap();
        let reference = naive(&q, &cache, &cfg, &[0, 1]);
        assert!(out.max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn gqa_pairs_share_kv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AttentionConfig::new(2, 1, 4).unwrap();
        let q1 = Tensor::<f64>::randn([1, 3, 4], 1.0, &mut rng);
        let q = ops::stack(&[&ops::head(&q1, 0).unwrap(), &ops::head(&q1, 0).unwrap()]).unwrap();
        let cache = LayerCache::new(1, Tensor::randn([1, 3, 4], 1.0, &mut rng), Tensor::randn([1, 3, 4], 1.0, &mut rng)).unwrap();
        let out = attend(&q, &cache, &cfg, &[0, 1, 2]).unwrap();
        assert_eq!(ops::head(&out, 0).unwrap(), ops::head(&out, 1).unwrap());
    }

    #[test]
    fn rejects_bad_grouping() {
        assert!(AttentionConfig::new(4, 3, 4).is_err());
        assert!(AttentionConfig::new(4, 2, 5).is_err());
    }

    #[test]
    fn fused_single_source_unit_weight_equals_attend() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::new(2, 2, 4).unwrap();
        let q = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let cache = LayerCache::new(1, Tensor::randn([2, 3, 4], 1.0, &mut rng), Tensor::randn([2, 3, 4], 1.0, &mut rng)).unwrap();
        let one = FusionWeight::Scalar(1.0);
        let fused = attend_fused(&q, &[(&cache, &one)], &[(&cache, &one)], &cfg, &[0, 1, 2]).unwrap();
        let plain = attend(&q, &cache, &cfg, &[0, 1, 2]).unwrap();
        assert!(fused.max_abs_diff(&plain).unwrap() < 1e-14);
    }
}
