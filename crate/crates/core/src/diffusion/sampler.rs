use serde::{Deserialize, Serialize};

use super::guidance::{cfg_combine, cfg_rescale, GuidanceConfig};
use super::schedule::NoiseSchedule;
use crate::autodiff::{Rng, Tensor};
use crate::dit::{DitModel, ModelInput};
use crate::parallel::{self, Exec};
use crate::{Error, Result};

/// Anything that predicts a velocity for a noisy latent.
pub trait VelocityModel: Sync {
    fn velocity(&self, x_t: &Tensor, t: usize, text: &[usize]) -> Result<Tensor>;
}

impl VelocityModel for DitModel {
    fn velocity(&self, x_t: &Tensor, t: usize, text: &[usize]) -> Result<Tensor> {
        self.predict(&ModelInput {
            latent: x_t,
            mask: None,
            t,
            text,
        })
    }
}

/// Decreasing inference timesteps chosen by the trailing rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub timesteps: Vec<usize>,
}

impl SamplerPlan {
    /// `t_i = round(T - i T / S) - 1` for `i < S`; the first index is `T - 1`.
    pub fn trailing(train_steps: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > train_steps {
            return Err(Error::InvalidArgument(format!(
                "inference steps must be in [1, {train_steps}], got {num_steps}"
            )));
        }
        let stride = train_steps as f64 / num_steps as f64;
        let timesteps = (0..num_steps)
            .map(|i| (train_steps as f64 - i as f64 * stride).round() as usize - 1)
            .collect();
        Ok(Self { timesteps })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// `(t, t_prev)` pairs; the last step goes to the clean endpoint.
    pub fn steps(&self) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied()))
    }
}

/// Deterministic (eta = 0) step from `t` to `t_prev`; `None` is the clean endpoint.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    v_hat: &Tensor,
    t: usize,
    t_prev: Option<usize>,
) -> Result<Tensor> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::InvalidArgument(format!("ddim_step needs t_prev < t, got {p} >= {t}")));
        }
    }
    let (a, s) = schedule.coefficients(Some(t))?;
    let (ap, sp) = schedule.coefficients(t_prev)?;
    x_t.zip_map(v_hat, "ddim_step", |x, v| {
        let x0 = a * x - s * v;
        let eps = s * x + a * v;
        ap * x0 + sp * eps
    })
}

/// Runs the guided sampler from Gaussian noise of shape `[channels, frames]`.
///
/// With `w == 1` the negative branch is skipped, so the result is the
/// unguided trajectory bitwise.
#[allow(clippy::too_many_arguments)]
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    text: &[usize],
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    guidance: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    guidance.validate()?;
    let (channels, frames) = shape;
    let mut x = Tensor::new(&[channels, frames], rng.normal_vec(channels * frames))?;
    for (step, (t, t_prev)) in plan.steps().enumerate() {
        let v_pos = model.velocity(&x, t, text)?;
        let v = if guidance.w == 1.0 {
            v_pos
        } else {
            let v_neg = model.velocity(&x, t, &guidance.negative)?;
            let v_cfg = cfg_combine(&v_pos, &v_neg, guidance.w)?;
            cfg_rescale(&v_cfg, &v_pos, guidance.phi)?.v
        };
        x = ddim_step(schedule, &x, &v, t, t_prev)?;
        if !x.all_finite() {
            return Err(Error::SampleDiverged { step });
        }
    }
    Ok(x)
}

/// One [`sample`] per seed, each from `Rng::new(seed)`, in seed order.
#[allow(clippy::too_many_arguments)]
pub fn sample_seeds<M: VelocityModel + ?Sized>(
    model: &M,
    text: &[usize],
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    guidance: &GuidanceConfig,
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<Tensor>> {
    parallel::try_map_indexed(exec, seeds.len(), |i| {
        sample(model, text, shape, schedule, plan, guidance, &mut Rng::new(seeds[i]))
    })
}
