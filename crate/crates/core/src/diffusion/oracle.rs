//! Closed-form denoisers for testing samplers.

use super::sampler::VelocityModel;
use super::schedule::NoiseSchedule;
use crate::autodiff::Tensor;
use crate::Result;

/// Ideal velocity when every sample is `x0`: `v = (alpha x_t - x0) / sigma`.
#[derive(Debug, Clone)]
pub struct PointMassOracle {
    pub schedule: NoiseSchedule,
    pub x0: Tensor,
}

impl VelocityModel for PointMassOracle {
    fn velocity(&self, x_t: &Tensor, t: usize, _text: &[usize]) -> Result<Tensor> {
        let (a, s) = self.schedule.coefficients(Some(t))?;
        x_t.zip_map(&self.x0, "point_mass_oracle", |x, x0| (a * x - x0) / s)
    }
}

/// Exact posterior-mean velocity for i.i.d. `N(mean, std^2)` data.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub schedule: NoiseSchedule,
    pub mean: f64,
    pub std: f64,
}

impl GaussianOracle {
    /// Endpoint of the exact probability-flow map started from `noise` at
    /// the zero-SNR step: `mean + std * noise`.
    pub fn flow_endpoint(&self, noise: &Tensor) -> Tensor {
        noise.map(|z| self.mean + self.std * z)
    }
}

impl VelocityModel for GaussianOracle {
    fn velocity(&self, x_t: &Tensor, t: usize, _text: &[usize]) -> Result<Tensor> {
        let (a, s) = self.schedule.coefficients(Some(t))?;
        let var = self.std * self.std;
        let gain = a * var / (a * a * var + s * s);
        Ok(x_t.map(|x| {
            let x0 = self.mean + gain * (x - a * self.mean);
            (a * x - x0) / s
        }))
    }
}
