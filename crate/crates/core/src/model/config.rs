use serde::{Deserialize, Serialize};

use crate::cache_sharing::{plan_for_strategy, Granularity, Reconstruction, SharingPlan, Strategy};
use crate::error::{Error, Result};
use crate::rope::DEFAULT_ROPE_BASE;

/// How fusion weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Every free weight entry drawn from `N(0, 1)`.
    Normal,
    /// Unrolled chain weights; FusedKV-shaped plans only.
    Equivalent,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(InitScheme::Normal),
            "equivalent" => Ok(InitScheme::Equivalent),
            _ => Err(Error::Config(format!("unknown init scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "single" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub strategy: Strategy,
    /// Last storage layer `n` of the FusedKV family.
    pub middle: usize,
    pub init: InitScheme,
    pub init_std: f64,
    pub rope_base: f64,
    pub precision: Precision,
}

impl ModelConfig {
    /// Desk-scale defaults: 8 layers, width 64, 8 query heads (4 KV heads
    /// under GQA), vocabulary 64, context 128, middle layer 4.
    pub fn desk(strategy: Strategy) -> Self {
        ModelConfig {
            num_layers: 8,
            d_model: 64,
            q_heads: 8,
            kv_heads: if strategy == Strategy::Gqa { 4 } else { 8 },
            ffn_dim: 128,
            vocab: 64,
            max_seq: 128,
            strategy,
            middle: 4,
            init: InitScheme::Normal,
            init_std: 0.02,
            rope_base: DEFAULT_ROPE_BASE,
            precision: Precision::F64,
        }
    }

    /// Four layers of width 16, small enough for exhaustive finite
    /// differences.
    pub fn toy(strategy: Strategy) -> Self {
        ModelConfig {
            num_layers: 4,
            d_model: 16,
            q_heads: 4,
            kv_heads: if strategy == Strategy::Gqa { 2 } else { 4 },
            ffn_dim: 16,
            vocab: 16,
            max_seq: 64,
            middle: 2,
            ..Self::desk(strategy)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.q_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.q_heads) {
            return bad(format!("d_model {} is not a multiple of {} heads", self.d_model, self.q_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dim {} must be even", self.head_dim()));
        }
        if !self.q_heads.is_multiple_of(self.kv_heads) {
            return bad(format!("{} query heads cannot share {} KV heads", self.q_heads, self.kv_heads));
        }
        if self.strategy == Strategy::Gqa && self.kv_heads >= self.q_heads {
            return bad(format!(
                "GQA needs fewer KV heads than query heads, got {} and {}",
                self.kv_heads, self.q_heads
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init std {} must be positive", self.init_std));
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope base {} must exceed 1", self.rope_base));
        }
        let plan = self.plan()?;
        if self.init == InitScheme::Equivalent && self.strategy != Strategy::FusedKv {
            return bad(format!("equivalent init applies to FusedKV only, not {}", plan.strategy()));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<SharingPlan> {
        plan_for_strategy(self.strategy, self.num_layers, self.middle)
    }

    /// Parameter count from the shapes alone.
    ///
    /// Every layer owns two norms, `W_Q`, `W_O` and the MLP; only storage
    /// layers own `W_K` and `W_V`. Fusion weights add `D/2` per key vector
    /// (one per RoPE pair), `D` per value vector and 1 per scalar.
    pub fn param_count(&self) -> Result<usize> {
        let plan = self.plan()?;
        let (d, f, v, l) = (self.d_model, self.ffn_dim, self.vocab, self.num_layers);
        let kv_width = self.kv_heads * self.head_dim();
        let per_layer = 2 * d + 2 * d * d + 2 * d * f + f * d;
        let mut total = 2 * v * d + d + l * per_layer + plan.storage_layers().len() * 2 * d * kv_width;
        let hd = self.head_dim();
        for rule in plan.rules() {
            if let Reconstruction::WeightedFusion(g) = rule.kind {
                let (key, value) = match g {
                    Granularity::Scalar => (1, 1),
                    Granularity::Vector => (hd / 2, hd),
                };
                total += rule.key_sources.len() * key + rule.value_sources.len() * value;
            }
        }
        Ok(total)
    }
}
