//! Toy-scale diffusion transformer stack for 1D audio latents.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors, a reverse-mode tape, and a
//!   finite-difference gradient oracle.
//! - [`dit`]: the DiT block family (AdaLN per-block / single / SOLA,
//!   token-prepend), RoPE, QK-Norm, long-skip fusion, parameter counting and
//!   the `EZDT` checkpoint container.
//! - [`diffusion`]: zero terminal SNR schedule, v-parameterisation, DDIM
//!   stepping and classifier-free guidance with rescaling.
//! - [`training`]: span masks, synthetic latent data, AdamW, the three
//!   training stages and toy evaluation metrics.
//! - [`filter`]: similarity-threshold filtering of caption manifests.
//!
//! Data-parallel loops (per-sample gradients, multi-seed sampling, manifest
//! scoring) go through [`parallel`], which uses rayon when the `parallel`
//! feature is enabled and a plain iterator otherwise. Both paths produce
//! bitwise identical results.

pub mod autodiff;
pub mod diffusion;
pub mod dit;
mod error;
pub mod filter;
pub mod parallel;
pub mod training;

pub use error::{Error, Result};
