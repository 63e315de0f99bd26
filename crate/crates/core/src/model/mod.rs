//! The multi-task backbone: configuration, weights and the forward pass.
//!
//! Blocks use pre-norm residuals. With experts enabled, odd blocks replace
//! the MLP with a task-gated mixture of experts.

mod config;
mod runtime;
mod weights;

pub use config::{preset, BlockKind, ModelConfig, PRESET_NAMES};
pub use runtime::{
    forward, layer_norm, moe_block, patch_embed, vit_block, Block, BlockOutput, BlockSelection, FeedForward, Image,
    LayerNormParams, Model, RunReport, StageKind, StageRecord, Totals, LN_EPS,
};
pub use weights::{tensor_specs, write_random_weights, ModelWeights, TensorRole, TensorSpec, MAGIC, VERSION};
