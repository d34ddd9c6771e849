//! Diffusion-transformer blocks and the four compared variants.

pub mod attention;
mod block;
mod checkpoint;
mod config;
mod count;
mod init;
mod model;
mod modulation;

pub use block::{dit_block_forward, long_skip_fuse, LN_EPS};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TensorEntry, MAGIC, VERSION};
pub use config::{CondMode, ModelConfig, Scale, Variant};
pub use count::{count_params, param_group, MemoryEstimate, ParamTable, ACTIVATION_BYTES};
pub use init::{init_params, perturb_params};
pub use model::{graft_cross_attention, Ctx, DitModel, ModelInput, StepEmbedding};
pub use modulation::{modulation, Modulation};
