//! Three-stage training on synthetic class-conditioned latents.

mod data;
mod eval;
mod loss;
mod mask;
mod optimizer;
mod stage;

pub use data::{Dataset, SyntheticSpec};
pub use eval::{
    evaluate_toy, masked_reconstruction_mse, spectral_accuracy, spectral_class, sweep_cfg, EvalPlan, SweepCell,
    ToyMetrics,
};
pub use loss::{
    batch_loss_and_grads, conditional_loss, draw_conditional, draw_masked, example_loss, masked_diffusion_loss,
    Example,
};
pub use mask::{mask_runs, sample_mask, sample_mask_with_ratio, MaskSpec};
pub use optimizer::{AdamW, AdamWConfig};
pub use stage::{
    prepare_stage_model, train_stage, write_loss_csv, LossRecord, StageConfig, TrainOutcome, LOSS_CSV_HEADER,
};
