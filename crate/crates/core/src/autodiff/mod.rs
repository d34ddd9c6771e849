//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! [`Graph`] records every operation applied to its [`Var`] handles and
//! replays the adjoint rules in reverse order on [`Graph::backward`]. Leaf
//! gradients accumulate across backward calls until [`Graph::zero_grad`].
//! [`finite_diff_check`] compares those gradients against central
//! differences and is the correctness oracle for every training path.

mod gradcheck;
mod graph;
mod params;
mod rng;
mod signal;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, GroupError};
pub use graph::{Graph, Var};
pub use params::{Bindings, ParamStore};
pub use rng::Rng;
pub use signal::{fft_magnitude_time, sinusoidal_embedding, sinusoidal_positions};
pub use tensor::Tensor;
