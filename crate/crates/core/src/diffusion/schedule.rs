use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;

/// Base curve rescaled to zero terminal SNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSchedule {
    /// `beta_t = lerp(sqrt(0.00085), sqrt(0.012), t / (T - 1))^2`.
    #[default]
    ScaledLinear,
}

/// Signal and noise coefficients `alpha_t = sqrt(abar_t)`, `sigma_t = sqrt(1 - abar_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Builds a `t_count`-step schedule whose last step has `alpha = 0` exactly.
///
/// The base `sqrt(abar)` curve is shifted so its last value is zero and then
/// scaled so its first value is unchanged.
pub fn make_schedule(t_count: usize, base: BaseSchedule) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {t_count}")));
    }
    let base_alpha = match base {
        BaseSchedule::ScaledLinear => {
            let (lo, hi) = (BETA_START.sqrt(), BETA_END.sqrt());
            let mut abar = 1.0;
            (0..t_count)
                .map(|t| {
                    let b = lo + (hi - lo) * t as f64 / (t_count - 1) as f64;
                    abar *= 1.0 - b * b;
                    abar.sqrt()
                })
                .collect::<Vec<_>>()
        }
    };
    let first = base_alpha[0];
    let last = base_alpha[t_count - 1];
    let alpha: Vec<f64> = base_alpha.iter().map(|a| first * ((a - last) / (first - last))).collect();
    let sigma = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
    Ok(NoiseSchedule { alpha, sigma })
}

impl NoiseSchedule {
    /// Number of training steps `T`.
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `(alpha_t, sigma_t)`; `None` is the clean endpoint `(1, 0)`.
    pub fn coefficients(&self, t: Option<usize>) -> Result<(f64, f64)> {
        match t {
            None => Ok((1.0, 0.0)),
            Some(t) if t < self.len() => Ok((self.alpha[t], self.sigma[t])),
            Some(t) => Err(Error::InvalidArgument(format!("timestep {t} outside [0, {})", self.len()))),
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        (self.alpha[t] / self.sigma[t]).powi(2)
    }
}

/// `x_t = alpha_t x0 + sigma_t eps`.
pub fn add_noise(schedule: &NoiseSchedule, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    let (a, s) = schedule.coefficients(Some(t))?;
    x0.zip_map(eps, "add_noise", |x, e| a * x + s * e)
}

/// `v = alpha_t eps - sigma_t x0`.
pub fn v_target(schedule: &NoiseSchedule, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    let (a, s) = schedule.coefficients(Some(t))?;
    x0.zip_map(eps, "v_target", |x, e| a * e - s * x)
}

/// `x0 = alpha_t x_t - sigma_t v`.
pub fn recover_x0(schedule: &NoiseSchedule, x_t: &Tensor, v: &Tensor, t: usize) -> Result<Tensor> {
    let (a, s) = schedule.coefficients(Some(t))?;
    x_t.zip_map(v, "recover_x0", |x, v| a * x - s * v)
}
