//! Storage/reconstruction partition of the decoder layers, the source
//! mapping `Φ`, reconstruction by direct reuse or weighted fusion, and the
//! fusion-weight initialization schemes.

mod init;
mod plan;
mod reconstruct;
mod weights;

pub use init::{init_equivalent, init_normal, iterative_reconstruct, AuxiliaryWeights, ChainWeights};
pub use plan::{
    plan_for_strategy, Granularity, Reconstruction, ReconstructionRule, SharingPlan, Strategy,
};
pub use reconstruct::reconstruct;
pub use weights::{FusionWeight, FusionWeights, LayerCache};
