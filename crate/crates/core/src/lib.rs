//! Structured pruning of multi-head self-attention.
//!
//! The Q/K and V/O halves of each attention block are pruned independently
//! under one of three patterns (entire head, per head, same channel), ranked
//! by L1/L2 magnitude or by Fisher information, with a global or per-layer
//! threshold. Plans can be simulated by masking or applied structurally; the
//! two give identical outputs.

pub mod apply;
pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod model;
pub mod planner;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use apply::{apply_plan, sparsity_report, validate_plan, SparsityReport, Violation};
pub use attention::{AttentionBlock, BlockGrads, HeadLayout, Projection, PruneMask, Side};
pub use checkpoint::Checkpoint;
pub use data::{generate_dataset, DataConfig, Sample, Split, SynthDataset};
pub use error::{Error, ErrorClass, Result};
pub use exec::Execution;
pub use model::{ModelConfig, ToyModel};
pub use planner::{Pattern, PrunePlan, Threshold};
pub use scoring::{FisherAccumulator, Granularity, Metric, ScoreTable};
pub use tensor::{Matrix, Norm};
pub use train::{evaluate, iterative_prune_finetune, train, PruneConfig, RunReport, TrainConfig};
