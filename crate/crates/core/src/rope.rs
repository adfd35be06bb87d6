//! Rotary position embeddings and the pair-symmetric weights that keep a
//! reweighted key compatible with them.
//!
//! Subspace `j` of a head vector is the coordinate pair `(2j, 2j+1)`. A token
//! at position `m` has every subspace rotated by `m·θⱼ` with
//! `θⱼ = base^(−2j/D)`.
//!
//! Reweighting a rotated key elementwise by `w` before the dot product with a
//! rotated query gives, per subspace, a term in `cos/sin((m−n)θⱼ)` scaled by
//! `(w₂ⱼ + w₂ⱼ₊₁)/2` and a term in `cos/sin((m+n)θⱼ)` scaled by
//! `(w₂ⱼ − w₂ⱼ₊₁)/2`. The second term carries absolute position and vanishes
//! exactly when every pair has equal weights, which is what
//! [`PairSymmetricWeight`] guarantees by storing one value per pair.

use crate::error::{Error, Result};
use crate::numerics::{ops, sum, Real, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RopeSchedule {
    head_dim: usize,
    base: f64,
    angles: Vec<f64>,
}

impl RopeSchedule {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("RoPE head dim {head_dim} must be even and positive")));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("RoPE base {base} must exceed 1")));
        }
        let angles = (0..head_dim / 2)
            .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
            .collect();
        Ok(RopeSchedule {
            head_dim,
            base,
            angles,
        })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_ROPE_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// `θⱼ` for `j in 0..D/2`.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Rotates a `[.. × s × D]` tensor; `inverse` rotates by the negated
    /// angles (the transpose, used by the backward pass).
    pub fn rotate<T: Real>(&self, x: &Tensor<T>, positions: &[usize], inverse: bool) -> Result<Tensor<T>> {
        let d = x.last_dim();
        if d != self.head_dim || x.ndim() < 2 {
            return Err(Error::dim(
                "rope",
                format!("input {:?} for head dim {}", x.shape(), self.head_dim),
            ));
        }
        let s = x.shape()[x.ndim() - 2];
        if positions.len() != s {
            return Err(Error::dim(
                "rope",
                format!("{} positions for sequence length {s}", positions.len()),
            ));
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let table: Vec<(T, T)> = positions
            .iter()
            .flat_map(|&m| {
                self.angles.iter().map(move |&theta| {
                    let a = sign * m as f64 * theta;
                    (T::of(a.cos()), T::of(a.sin()))
                })
            })
            .collect();
        let half = d / 2;
        let mut out = Vec::with_capacity(x.numel());
        for (r, row) in x.data().chunks(d).enumerate() {
            let t = r % s;
            for j in 0..half {
                let (c, sn) = table[t * half + j];
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                out.push(a * c - b * sn);
                out.push(a * sn + b * c);
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// Rotates each row of `x` (`[s × D]`) by its position.
pub fn apply_rope<T: Real>(x: &Tensor<T>, positions: &[usize], schedule: &RopeSchedule) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(Error::dim("apply_rope", format!("expected [s × D], got {:?}", x.shape())));
    }
    schedule.rotate(x, positions, false)
}

/// A length-`D` weight vector with `w[2j] == w[2j+1]`, stored as `D/2` free
/// values so the constraint can never drift.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSymmetricWeight<T = f64> {
    free: Vec<T>,
}

impl<T: Real> PairSymmetricWeight<T> {
    pub fn new(free: Vec<T>) -> Self {
        PairSymmetricWeight { free }
    }

    pub fn ones(head_dim: usize) -> Self {
        Self::new(vec![T::one(); head_dim / 2])
    }

    /// Accepts an expanded vector only if every pair is exactly equal.
    pub fn from_expanded(w: &[T]) -> Result<Self> {
        if !w.len().is_multiple_of(2) {
            return Err(Error::dim("pair_symmetric", format!("odd length {}", w.len())));
        }
        let free = w
            .chunks(2)
            .enumerate()
            .map(|(j, p)| {
                if p[0] == p[1] {
                    Ok(p[0])
                } else {
                    Err(Error::Input(format!("pair {j} is not symmetric: {} vs {}", p[0], p[1])))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(free))
    }

    pub fn free(&self) -> &[T] {
        &self.free
    }

    pub fn free_mut(&mut self) -> &mut [T] {
        &mut self.free
    }

    pub fn dim(&self) -> usize {
        2 * self.free.len()
    }

    pub fn expand(&self) -> Vec<T> {
        self.free.iter().flat_map(|&x| [x, x]).collect()
    }
}

fn check_vec<T: Real>(op: &'static str, v: &Tensor<T>, d: usize) -> Result<()> {
    if v.ndim() != 1 || v.numel() != d {
        return Err(Error::dim(op, format!("expected a length-{d} vector, got {:?}", v.shape())));
    }
    Ok(())
}

fn rotate_vec<T: Real>(v: &Tensor<T>, pos: usize, schedule: &RopeSchedule) -> Result<Vec<T>> {
    let row = v.reshape([1, v.numel()])?;
    Ok(schedule.rotate(&row, &[pos], false)?.into_data())
}

/// `rope(q, m)ᵀ (w ⊙ rope(k, n))`, evaluated by rotating and multiplying.
pub fn score_direct<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    m: usize,
    n: usize,
    w: &[T],
    schedule: &RopeSchedule,
) -> Result<T> {
    let d = schedule.head_dim();
    check_vec("score_direct", q, d)?;
    check_vec("score_direct", k, d)?;
    if w.len() != d {
        return Err(Error::dim("score_direct", format!("weight length {}", w.len())));
    }
    let qr = rotate_vec(q, m, schedule)?;
    let kr = rotate_vec(k, n, schedule)?;
    Ok(sum(qr.iter().zip(&kr).zip(w).map(|((&a, &b), &c)| a * c * b)))
}

/// The same score written as a relative-position part plus an
/// absolute-position part, summed over all subspaces.
pub fn score_decomposed<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    m: usize,
    n: usize,
    w: &[T],
    schedule: &RopeSchedule,
) -> Result<T> {
    let d = schedule.head_dim();
    check_vec("score_decomposed", q, d)?;
    check_vec("score_decomposed", k, d)?;
    if w.len() != d {
        return Err(Error::dim("score_decomposed", format!("weight length {}", w.len())));
    }
    let (q, k) = (q.data(), k.data());
    let half = T::of(0.5);
    let rel = m as f64 - n as f64;
    let abs = (m + n) as f64;
    let mut total = T::zero();
    for (j, &theta) in schedule.angles().iter().enumerate() {
        let (q0, q1, k0, k1) = (q[2 * j], q[2 * j + 1], k[2 * j], k[2 * j + 1]);
        let (w0, w1) = (w[2 * j], w[2 * j + 1]);
        let (cr, sr) = (T::of((rel * theta).cos()), T::of((rel * theta).sin()));
        let (ca, sa) = (T::of((abs * theta).cos()), T::of((abs * theta).sin()));
        let relative = (q0 * k0 + q1 * k1) * cr + (q0 * k1 - q1 * k0) * sr;
        let absolute = (q0 * k0 - q1 * k1) * ca - (q0 * k1 + q1 * k0) * sa;
        total += (w0 + w1) * half * relative + (w0 - w1) * half * absolute;
    }
    Ok(total)
}

/// Score of a rotated query against `Σᵢ wⁱ ⊙ rope(kⁱ, n)`, all source keys at
/// position `n`.
pub fn fused_key_score<T: Real>(
    q: &Tensor<T>,
    keys: &[Tensor<T>],
    (m, n): (usize, usize),
    weights: &[PairSymmetricWeight<T>],
    schedule: &RopeSchedule,
) -> Result<T> {
    if keys.len() != weights.len() || keys.is_empty() {
        return Err(Error::dim(
            "fused_key_score",
            format!("{} keys with {} weights", keys.len(), weights.len()),
        ));
    }
    let d = schedule.head_dim();
    check_vec("fused_key_score", q, d)?;
    let mut fused = vec![T::zero(); d];
    for (k, w) in keys.iter().zip(weights) {
        check_vec("fused_key_score", k, d)?;
        if w.dim() != d {
            return Err(Error::dim("fused_key_score", format!("weight dim {}", w.dim())));
        }
        let kr = rotate_vec(k, n, schedule)?;
        for ((f, &kv), wv) in fused.iter_mut().zip(&kr).zip(w.expand()) {
            *f += wv * kv;
        }
    }
    let qr = rotate_vec(q, m, schedule)?;
    Ok(ops::dot(&qr, &fused))
}
