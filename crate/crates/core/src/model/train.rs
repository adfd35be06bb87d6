use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

use super::heatmap::{fusion_weight_heatmap, FusionHeatmap};
use super::params::Model;
use super::tasks::{Task, TaskSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the run, after warmup.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
            schedule: LrSchedule::Constant,
            warmup_steps: 0,
        }
    }
}

impl AdamW {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per example.
    pub seq_len: usize,
    pub seed: u64,
    /// Gradient norms are recorded at step 0, every `log_every` steps and at
    /// the last step.
    pub log_every: usize,
    pub optimizer: AdamW,
}

impl TrainConfig {
    pub fn new(task: Task, steps: usize) -> Self {
        TrainConfig {
            task,
            steps,
            batch_size: 8,
            seq_len: 17,
            seed: 0,
            log_every: 50,
            optimizer: AdamW::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// L2 norms of one layer's projection gradients. Reconstruction layers have
/// no `W_K`/`W_V`, so their `k` and `v` are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradNormRecord {
    pub step: usize,
    pub layer: usize,
    pub q: f64,
    pub k: Option<f64>,
    pub v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub strategy: String,
    pub task: Task,
    pub losses: Vec<StepRecord>,
    pub grad_norms: Vec<GradNormRecord>,
    /// Fusion weights after the last step, when the strategy has any.
    pub fusion: Option<FusionHeatmap>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Mean loss over the last `window` steps, less noisy than one batch.
    pub fn tail_loss(&self, window: usize) -> f64 {
        let n = window.clamp(1, self.losses.len().max(1));
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }

    /// `step,loss,lr` rows.
    pub fn write_losses_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "lr"])?;
        for r in &self.losses {
            w.write_record([r.step.to_string(), fmt_f64(r.loss), fmt_f64(r.lr)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `step,layer,q,k,v` rows; empty cells for absent projections.
    pub fn write_grad_norms_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "layer", "q", "k", "v"])?;
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        for r in &self.grad_norms {
            w.write_record([r.step.to_string(), r.layer.to_string(), fmt_f64(r.q), opt(r.k), opt(r.v)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn l2<T: Real>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

struct Moments<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

/// Trains in place with AdamW on batches drawn from `cfg.task`.
///
/// The sampler is seeded from `cfg.seed`, so the same model and config give
/// the same loss curve bit for bit.
pub fn train<T: Real>(model: &mut Model<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("training needs at least one step and one example".into()));
    }
    if cfg.seq_len > model.config().max_seq {
        return Err(Error::Config(format!(
            "examples of {} tokens exceed the context of {}",
            cfg.seq_len,
            model.config().max_seq
        )));
    }
    let opt = cfg.optimizer;
    if !(opt.lr > 0.0 && opt.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be positive", opt.lr)));
    }
    let sampler = TaskSampler::new(cfg.task, model.config().vocab, cfg.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = Moments {
        m: model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        v: model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::new();
    let num_layers = model.config().num_layers;

    for step in 0..cfg.steps {
        let batch = sampler.batch(cfg.batch_size, &mut rng);
        let (loss, mut grads) = match model.loss_and_grads(&batch) {
            Ok(r) => r,
            Err(Error::Evaluation(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let lr = opt.lr_at(step, cfg.steps);
        losses.push(StepRecord { step, loss, lr });

        if step == 0 || step + 1 == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            for layer in 1..=num_layers {
                let (q, k, v) = model.qkv_param_indices(layer).expect("layer in range");
                grad_norms.push(GradNormRecord {
                    step,
                    layer,
                    q: l2(&grads[q]),
                    k: k.map(|i| l2(&grads[i])),
                    v: v.map(|i| l2(&grads[i])),
                });
            }
        }

        if let Some(clip) = opt.grad_clip {
            let total = grads.iter().map(|g| l2(g).powi(2)).sum::<f64>().sqrt();
            if total > clip {
                let c = T::of(clip / total);
                for g in &mut grads {
                    *g = g.scale(c);
                }
            }
        }
        adamw_step(model, &grads, &mut state, &opt, lr, step + 1);
    }

    let fusion = if model.plan().has_fusion() {
        Some(fusion_weight_heatmap(model)?)
    } else {
        None
    };
    Ok(TrainReport {
        strategy: model.plan().strategy().to_string(),
        task: cfg.task,
        losses,
        grad_norms,
        fusion,
    })
}

fn adamw_step<T: Real>(model: &mut Model<T>, grads: &[Tensor<T>], st: &mut Moments<T>, opt: &AdamW, lr: f64, t: usize) {
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((p, g), m), v) in model
        .params_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut st.m)
        .zip(&mut st.v)
    {
        let decay = if p.ndim() == 2 { opt.weight_decay } else { 0.0 };
        let pd = p.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let gk = gk.as_f64();
            let mk = b1 * m.data()[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * v.data()[k].as_f64() + (1.0 - b2) * gk * gk;
            m.data_mut()[k] = T::of(mk);
            v.data_mut()[k] = T::of(vk);
            let update = (mk / c1) / ((vk / c2).sqrt() + opt.eps);
            let w = pd[k].as_f64();
            pd[k] = T::of(w - lr * (update + decay * w));
        }
    }
}
