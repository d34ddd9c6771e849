//! Zero terminal SNR schedule, v-parameterisation, DDIM sampling and
//! classifier-free guidance with rescaling.

mod guidance;
pub mod oracle;
mod sampler;
mod schedule;

pub use guidance::{cfg_combine, cfg_rescale, GuidanceConfig, Rescaled};
pub use sampler::{ddim_step, sample, sample_seeds, SamplerPlan, VelocityModel};
pub use schedule::{add_noise, make_schedule, recover_x0, v_target, BaseSchedule, NoiseSchedule};
