use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ops, Real, Tensor};
use crate::rope::PairSymmetricWeight;

use super::plan::{Granularity, Reconstruction, SharingPlan};

/// One fusion coefficient, broadcast over heads and positions.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionWeight<T = f64> {
    Scalar(T),
    /// Key weights: one value per RoPE pair.
    PairSymmetric(PairSymmetricWeight<T>),
    /// Value weights: unconstrained per channel.
    Vector(Vec<T>),
}

impl<T: Real> FusionWeight<T> {
    pub fn one(granularity: Granularity, head_dim: usize, key: bool) -> Self {
        Self::filled(granularity, head_dim, key, T::one())
    }

    pub fn zero(granularity: Granularity, head_dim: usize, key: bool) -> Self {
        Self::filled(granularity, head_dim, key, T::zero())
    }

    fn filled(granularity: Granularity, head_dim: usize, key: bool, v: T) -> Self {
        match (granularity, key) {
            (Granularity::Scalar, _) => FusionWeight::Scalar(v),
            (Granularity::Vector, true) => {
                FusionWeight::PairSymmetric(PairSymmetricWeight::new(vec![v; head_dim / 2]))
            }
            (Granularity::Vector, false) => FusionWeight::Vector(vec![v; head_dim]),
        }
    }

    /// Broadcast to a length-`head_dim` channel vector.
    pub fn expand(&self, head_dim: usize) -> Result<Vec<T>> {
        let v = match self {
            FusionWeight::Scalar(s) => vec![*s; head_dim],
            FusionWeight::PairSymmetric(w) => w.expand(),
            FusionWeight::Vector(v) => v.clone(),
        };
        if v.len() != head_dim {
            return Err(Error::dim(
                "fusion weight",
                format!("weight of length {} for head dim {head_dim}", v.len()),
            ));
        }
        Ok(v)
    }

    /// Number of free parameters.
    pub fn free_len(&self) -> usize {
        match self {
            FusionWeight::Scalar(_) => 1,
            FusionWeight::PairSymmetric(w) => w.free().len(),
            FusionWeight::Vector(v) => v.len(),
        }
    }

    pub fn free(&self) -> Vec<T> {
        match self {
            FusionWeight::Scalar(s) => vec![*s],
            FusionWeight::PairSymmetric(w) => w.free().to_vec(),
            FusionWeight::Vector(v) => v.clone(),
        }
    }

    pub fn is_rope_compatible(&self) -> bool {
        !matches!(self, FusionWeight::Vector(_))
    }

    /// Mean absolute value over the expanded channels.
    pub fn mean_abs(&self) -> f64 {
        let f = self.free();
        f.iter().map(|x| x.as_f64().abs()).sum::<f64>() / f.len() as f64
    }

    fn combine(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        use FusionWeight::*;
        let zip = |a: &[T], b: &[T]| -> Result<Vec<T>> {
            if a.len() != b.len() {
                return Err(Error::dim("fusion weight", format!("lengths {} and {}", a.len(), b.len())));
            }
            Ok(a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
        };
        Ok(match (self, other) {
            (Scalar(a), Scalar(b)) => Scalar(f(*a, *b)),
            (Scalar(a), PairSymmetric(w)) => PairSymmetric(PairSymmetricWeight::new(w.free().iter().map(|&x| f(*a, x)).collect())),
            (PairSymmetric(w), Scalar(b)) => PairSymmetric(PairSymmetricWeight::new(w.free().iter().map(|&x| f(x, *b)).collect())),
            (PairSymmetric(a), PairSymmetric(b)) => PairSymmetric(PairSymmetricWeight::new(zip(a.free(), b.free())?)),
            (Scalar(a), Vector(v)) => Vector(v.iter().map(|&x| f(*a, x)).collect()),
            (Vector(v), Scalar(b)) => Vector(v.iter().map(|&x| f(x, *b)).collect()),
            (Vector(a), Vector(b)) => Vector(zip(a, b)?),
            (PairSymmetric(a), Vector(b)) => Vector(zip(&a.expand(), b)?),
            (Vector(a), PairSymmetric(b)) => Vector(zip(a, &b.expand())?),
        })
    }

    /// Elementwise product; stays pair-symmetric when both factors are.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a * b)
    }

    /// Elementwise sum; stays pair-symmetric when both terms are.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a + b)
    }
}

/// Learnable coefficients `a_ij` (keys) and `b_ij` (values) keyed by
/// `(target layer, source layer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T = f64> {
    head_dim: usize,
    key: BTreeMap<(usize, usize), FusionWeight<T>>,
    value: BTreeMap<(usize, usize), FusionWeight<T>>,
}

impl<T: Real> FusionWeights<T> {
    pub fn new(head_dim: usize) -> Self {
        FusionWeights {
            head_dim,
            key: BTreeMap::new(),
            value: BTreeMap::new(),
        }
    }

    /// All-ones weights for every fused source of the plan.
    pub fn unit(plan: &SharingPlan, head_dim: usize) -> Self {
        Self::build(plan, head_dim, |_, _| T::one())
    }

    /// Weight one on `keep(target)` and zero elsewhere.
    pub fn one_hot(plan: &SharingPlan, head_dim: usize, keep: impl Fn(usize) -> usize) -> Self {
        Self::build(plan, head_dim, |i, j| if keep(i) == j { T::one() } else { T::zero() })
    }

    fn build(plan: &SharingPlan, head_dim: usize, value_of: impl Fn(usize, usize) -> T) -> Self {
        let mut w = Self::new(head_dim);
        for rule in plan.rules() {
            let Reconstruction::WeightedFusion(g) = rule.kind else { continue };
            for &j in &rule.key_sources {
                w.key.insert((rule.layer, j), FusionWeight::filled(g, head_dim, true, value_of(rule.layer, j)));
            }
            for &j in &rule.value_sources {
                w.value.insert((rule.layer, j), FusionWeight::filled(g, head_dim, false, value_of(rule.layer, j)));
            }
        }
        w
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn key(&self, target: usize, source: usize) -> Option<&FusionWeight<T>> {
        self.key.get(&(target, source))
    }

    pub fn value(&self, target: usize, source: usize) -> Option<&FusionWeight<T>> {
        self.value.get(&(target, source))
    }

    /// Key weights must be scalar or pair-symmetric.
    pub fn set_key(&mut self, target: usize, source: usize, w: FusionWeight<T>) -> Result<()> {
        if !w.is_rope_compatible() {
            return Err(Error::Input(format!(
                "key weight ({target}, {source}) must be pair-symmetric or scalar"
            )));
        }
        w.expand(self.head_dim)?;
        self.key.insert((target, source), w);
        Ok(())
    }

    pub fn set_value(&mut self, target: usize, source: usize, w: FusionWeight<T>) -> Result<()> {
        w.expand(self.head_dim)?;
        self.value.insert((target, source), w);
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = (&(usize, usize), &FusionWeight<T>)> {
        self.key.iter()
    }

    pub fn values(&self) -> impl Iterator<Item = (&(usize, usize), &FusionWeight<T>)> {
        self.value.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.key.is_empty() && self.value.is_empty()
    }
}

/// Post-RoPE keys and values of one layer, `[H_kv × s × D]` each, covering
/// positions `start..start + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T: Real = f64> {
    pub layer: usize,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub start: usize,
}

impl<T: Real> LayerCache<T> {
    pub fn new(layer: usize, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        Self::starting_at(layer, k, v, 0)
    }

    pub fn starting_at(layer: usize, k: Tensor<T>, v: Tensor<T>, start: usize) -> Result<Self> {
        k.dim3("layer cache")?;
        k.same_shape(&v, "layer cache")?;
        Ok(LayerCache { layer, k, v, start })
    }

    pub fn len(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kv_heads(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.k.shape()[2]
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.start..self.start + self.len()).collect()
    }

    /// Stored element count (keys plus values).
    pub fn elements(&self) -> usize {
        self.k.numel() + self.v.numel()
    }

    /// Appends rows for the next positions.
    pub fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        self.k = ops::concat_seq(&self.k, k)?;
        self.v = ops::concat_seq(&self.v, v)?;
        Ok(())
    }
}
