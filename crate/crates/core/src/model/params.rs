use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionConfig;
use crate::cache_sharing::{
    init_equivalent, init_normal, AuxiliaryWeights, FusionWeight, FusionWeights, Granularity, Reconstruction,
    SharingPlan,
};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rope::{PairSymmetricWeight, RopeSchedule};

use super::config::{InitScheme, ModelConfig};

/// Parameter indices of one decoder layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub attn_norm: usize,
    pub wq: usize,
    /// `None` on reconstruction layers.
    pub wk: Option<usize>,
    pub wv: Option<usize>,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub layers: Vec<LayerSlots>,
    pub final_norm: usize,
    pub lm_head: usize,
    /// `(target, source)` to parameter index.
    pub fusion_key: BTreeMap<(usize, usize), usize>,
    pub fusion_value: BTreeMap<(usize, usize), usize>,
}

/// A decoder-only transformer whose layers share caches according to a
/// [`SharingPlan`].
///
/// Parameters live in one ordered list so optimizers, checkpoints and the
/// gradient checker can treat them uniformly.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f64> {
    pub(crate) cfg: ModelConfig,
    pub(crate) plan: SharingPlan,
    pub(crate) attn: AttentionConfig,
    pub(crate) rope: Arc<RopeSchedule>,
    pub(crate) names: Vec<String>,
    pub(crate) params: Vec<Tensor<T>>,
    pub(crate) layout: Layout,
}

struct Builder<T: Real> {
    rng: ChaCha8Rng,
    std: f64,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn linear(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let t = Tensor::randn([rows, cols], self.std, &mut self.rng);
        self.push(name, t)
    }

    fn norm(&mut self, name: String, d: usize) -> usize {
        self.push(name, Tensor::ones([d]))
    }
}

fn fusion_tensor<T: Real>(w: &FusionWeight<T>) -> Tensor<T> {
    Tensor::from_vec(w.free())
}

/// Builds a model with linear weights drawn from `N(0, init_std²)`, unit norm
/// gains and fusion weights from the configured scheme.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let hd = cfg.head_dim();
    let attn = AttentionConfig::new(cfg.q_heads, cfg.kv_heads, hd)?;
    let rope = Arc::new(RopeSchedule::new(hd, cfg.rope_base)?);
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    let kv_width = cfg.kv_heads * hd;

    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        std: cfg.init_std,
        names: Vec::new(),
        params: Vec::new(),
    };
    let embed = b.linear("embed".into(), cfg.vocab, d);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 1..=cfg.num_layers {
        let storage = plan.is_storage(i);
        let attn_norm = b.norm(format!("layer{i}.attn_norm"), d);
        let wq = b.linear(format!("layer{i}.wq"), d, d);
        let wk = storage.then(|| b.linear(format!("layer{i}.wk"), d, kv_width));
        let wv = storage.then(|| b.linear(format!("layer{i}.wv"), d, kv_width));
        let wo = b.linear(format!("layer{i}.wo"), d, d);
        let mlp_norm = b.norm(format!("layer{i}.mlp_norm"), d);
        let w_up = b.linear(format!("layer{i}.w_up"), d, 2 * f);
        let w_down = b.linear(format!("layer{i}.w_down"), f, d);
        layers.push(LayerSlots {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_up,
            w_down,
        });
    }
    let final_norm = b.norm("final_norm".into(), d);
    let lm_head = b.linear("lm_head".into(), d, cfg.vocab);

    let mut fusion_key = BTreeMap::new();
    let mut fusion_value = BTreeMap::new();
    if plan.has_fusion() {
        // Fusion weights get their own stream so that adding them never
        // perturbs the draws of the shared linear weights.
        let fseed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let weights: FusionWeights<T> = match cfg.init {
            InitScheme::Normal => init_normal(&plan, hd, fseed)?,
            InitScheme::Equivalent => {
                let aux = AuxiliaryWeights::sample_normal(&plan, hd, Granularity::Vector, fseed)?;
                init_equivalent(&plan, &aux)?
            }
        };
        for (&(i, j), w) in weights.keys() {
            let idx = b.push(format!("fusion.key.{i}.{j}"), fusion_tensor(w));
            fusion_key.insert((i, j), idx);
        }
        for (&(i, j), w) in weights.values() {
            let idx = b.push(format!("fusion.value.{i}.{j}"), fusion_tensor(w));
            fusion_value.insert((i, j), idx);
        }
    }

    Ok(Model {
        cfg: cfg.clone(),
        plan,
        attn,
        rope,
        names: b.names,
        params: b.params,
        layout: Layout {
            embed,
            layers,
            final_norm,
            lm_head,
            fusion_key,
            fusion_value,
        },
    })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &SharingPlan {
        &self.plan
    }

    pub fn attention_config(&self) -> &AttentionConfig {
        &self.attn
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Bytes read to stream every weight once.
    pub fn weight_bytes(&self) -> usize {
        self.num_params() * T::BYTES
    }

    /// Replaces all parameters, e.g. with a perturbed copy.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&params) {
            old.same_shape(new, "set_params")?;
        }
        self.params = params;
        Ok(())
    }

    /// The same model with every parameter converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            plan: self.plan.clone(),
            attn: self.attn,
            rope: Arc::clone(&self.rope),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Indices of `(W_Q, W_K, W_V)` for layer `i` (1-based).
    pub fn qkv_param_indices(&self, layer: usize) -> Option<(usize, Option<usize>, Option<usize>)> {
        let s = self.layout.layers.get(layer.checked_sub(1)?)?;
        Some((s.wq, s.wk, s.wv))
    }

    /// Fusion weights in cache-sharing form, for inference paths that work
    /// on plain tensors.
    pub fn fusion_weights(&self) -> Result<FusionWeights<T>> {
        let hd = self.attn.head_dim;
        let mut out = FusionWeights::new(hd);
        for rule in self.plan.rules() {
            let Reconstruction::WeightedFusion(g) = rule.kind else { continue };
            for &j in &rule.key_sources {
                let t = &self.params[self.layout.fusion_key[&(rule.layer, j)]];
                out.set_key(rule.layer, j, as_weight(t, g, true))?;
            }
            for &j in &rule.value_sources {
                let t = &self.params[self.layout.fusion_value[&(rule.layer, j)]];
                out.set_value(rule.layer, j, as_weight(t, g, false))?;
            }
        }
        Ok(out)
    }
}

fn as_weight<T: Real>(t: &Tensor<T>, g: Granularity, key: bool) -> FusionWeight<T> {
    match (g, key) {
        (Granularity::Scalar, _) => FusionWeight::Scalar(t.data()[0]),
        (Granularity::Vector, true) => FusionWeight::PairSymmetric(PairSymmetricWeight::new(t.data().to_vec())),
        (Granularity::Vector, false) => FusionWeight::Vector(t.data().to_vec()),
    }
}
