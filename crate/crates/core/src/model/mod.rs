//! Desk-scale decoder stack: embeddings, pre-norm attention over a sharing
//! plan, SwiGLU MLPs, training and greedy decoding.

mod checkpoint;
mod config;
mod forward;
mod heatmap;
mod params;
mod tasks;
mod train;

pub use checkpoint::{MAGIC, VERSION};
pub use config::{InitScheme, ModelConfig, Precision};
pub use forward::{decode, forward_loss, DecodeOutput, Example, LossObjective, Trace};
pub use heatmap::{fusion_weight_heatmap, FusionHeatmap, HeatmapCell};
pub use params::{build_model, Model};
pub use tasks::{corpus_alphabet, Task, TaskSampler, CORPUS, SEPARATOR};
pub use train::{train, AdamW, GradNormRecord, LrSchedule, StepRecord, TrainConfig, TrainReport};

#[cfg(test)]
mod tests;
