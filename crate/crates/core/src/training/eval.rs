use serde::{Deserialize, Serialize};

use super::data::{Dataset, SyntheticSpec};
use super::mask::{sample_mask, MaskSpec};
use crate::autodiff::{fft_magnitude_time, Rng, Tensor};
use crate::diffusion::{add_noise, recover_x0, sample, GuidanceConfig, NoiseSchedule, SamplerPlan, VelocityModel};
use crate::dit::{DitModel, ModelInput};
use crate::parallel::{self, Exec};
use crate::{Error, Result};

/// Class whose frequency bin has the largest channel-averaged FFT magnitude.
/// Only bins `1..=num_classes` compete, so an uninformed generator scores
/// `1 / num_classes` on average.
pub fn spectral_class(x: &Tensor, num_classes: usize) -> Result<usize> {
    let mag = fft_magnitude_time(x)?;
    let (channels, bins) = mag.dims2("spectral_class")?;
    if bins <= num_classes {
        return Err(Error::InvalidArgument(format!(
            "{bins} frequency bins cannot separate {num_classes} classes"
        )));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..num_classes {
        let avg = (0..channels).map(|c| mag.data()[c * bins + k + 1]).sum::<f64>() / channels as f64;
        if avg > best.1 {
            best = (k, avg);
        }
    }
    Ok(best.0)
}

/// Fraction of `(sample, class)` pairs whose spectral class matches.
pub fn spectral_accuracy(samples: &[(Tensor, usize)], num_classes: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, class) in samples {
        if spectral_class(x, num_classes)? == *class {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean squared error of the recovered `x0` on noised frames of held-out
/// data, with one span mask and timestep per sample.
pub fn masked_reconstruction_mse(
    model: &DitModel,
    schedule: &NoiseSchedule,
    test: &Dataset,
    mask_spec: &MaskSpec,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let draws: Vec<(Vec<bool>, usize, Tensor)> = test
        .items
        .iter()
        .map(|(x0, _)| {
            let mask = sample_mask(x0.shape()[1], mask_spec, &mut rng)?;
            let t = rng.below(schedule.len());
            let eps = Tensor::new(x0.shape(), rng.normal_vec(x0.len()))?;
            Ok((mask, t, eps))
        })
        .collect::<Result<_>>()?;
    let per = parallel::try_map_indexed(exec, test.len(), |i| {
        let (x0, _) = &test.items[i];
        let (mask, t, eps) = &draws[i];
        let frames = x0.shape()[1];
        let x_t = add_noise(schedule, x0, eps, *t)?;
        let latent = Tensor::from_fn(x0.shape(), |j| {
            if mask[j % frames] {
                x_t.data()[j]
            } else {
                x0.data()[j]
            }
        });
        let v = model.predict(&ModelInput {
            latent: &latent,
            mask: Some(mask),
            t: *t,
            text: &[],
        })?;
        let x0_hat = recover_x0(schedule, &latent, &v, *t)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for j in 0..x0.len() {
            if mask[j % frames] {
                sum += (x0_hat.data()[j] - x0.data()[j]).powi(2);
                n += 1;
            }
        }
        Ok::<_, Error>((sum, n))
    })?;
    let (sum, n) = per.iter().fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    Ok(sum / n.max(1) as f64)
}

/// Which generated samples an evaluation draws: sample `i` uses seed
/// `base_seed + i` and class `i % num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    pub steps: usize,
    pub num_samples: usize,
    pub base_seed: u64,
}

fn generate<M: VelocityModel + ?Sized>(
    model: &M,
    data: &SyntheticSpec,
    schedule: &NoiseSchedule,
    plan: &EvalPlan,
    guidance: &GuidanceConfig,
    exec: Exec,
) -> Result<Vec<(Tensor, usize)>> {
    let sampler = SamplerPlan::trailing(schedule.len(), plan.steps)?;
    parallel::try_map_indexed(exec, plan.num_samples, |i| {
        let class = i % data.num_classes;
        let mut rng = Rng::new(plan.base_seed + i as u64);
        let x = sample(
            model,
            &[class],
            (data.latent_channels, data.frames),
            schedule,
            &sampler,
            guidance,
            &mut rng,
        )?;
        Ok((x, class))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    pub masked_mse: Option<f64>,
    pub spectral_accuracy: f64,
    pub sample_std_mean: f64,
    pub sample_std_spread: f64,
    pub n: usize,
}

fn std_stats(samples: &[(Tensor, usize)]) -> (f64, f64) {
    let stds = Tensor::vector(samples.iter().map(|(x, _)| x.std()).collect());
    (stds.mean(), stds.std())
}

/// Spectral accuracy and sample statistics of generated latents, plus the
/// masked-reconstruction error when a test set is given.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_toy(
    model: &DitModel,
    data: &SyntheticSpec,
    schedule: &NoiseSchedule,
    test: Option<(&Dataset, &MaskSpec)>,
    plan: &EvalPlan,
    guidance: &GuidanceConfig,
    exec: Exec,
) -> Result<ToyMetrics> {
    let samples = generate(model, data, schedule, plan, guidance, exec)?;
    let (sample_std_mean, sample_std_spread) = std_stats(&samples);
    let masked_mse = match test {
        Some((set, spec)) => Some(masked_reconstruction_mse(model, schedule, set, spec, plan.base_seed, exec)?),
        None => None,
    };
    Ok(ToyMetrics {
        masked_mse,
        spectral_accuracy: spectral_accuracy(&samples, data.num_classes)?,
        sample_std_mean,
        sample_std_spread,
        n: samples.len(),
    })
}

/// One `(w, phi)` cell of the guidance sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub w: f64,
    pub phi: f64,
    /// Spectral accuracy of the generated samples.
    pub alignment: f64,
    /// Mean over samples of `|std(x) - std(x_ref)|`, where `x_ref` is the
    /// `w = 1` sample from the same seed and class.
    pub std_drift: f64,
    pub n: usize,
}

/// Evaluates every `(w, phi)` pair, `w` major.
pub fn sweep_cfg<M: VelocityModel + ?Sized>(
    model: &M,
    data: &SyntheticSpec,
    schedule: &NoiseSchedule,
    plan: &EvalPlan,
    ws: &[f64],
    phis: &[f64],
    exec: Exec,
) -> Result<Vec<SweepCell>> {
    if ws.is_empty() || phis.is_empty() || plan.num_samples == 0 {
        return Err(Error::InvalidArgument("guidance sweep grid is empty".into()));
    }
    for &w in ws {
        for &phi in phis {
            GuidanceConfig::new(w, phi).validate()?;
        }
    }
    let reference = generate(model, data, schedule, plan, &GuidanceConfig::new(1.0, 0.0), exec)?;
    let mut cells = Vec::with_capacity(ws.len() * phis.len());
    for &w in ws {
        for &phi in phis {
            let samples = if w == 1.0 {
                reference.clone()
            } else {
                generate(model, data, schedule, plan, &GuidanceConfig::new(w, phi), exec)?
            };
            let drift = samples
                .iter()
                .zip(&reference)
                .map(|((x, _), (r, _))| (x.std() - r.std()).abs())
                .sum::<f64>()
                / samples.len() as f64;
            cells.push(SweepCell {
                w,
                phi,
                alignment: spectral_accuracy(&samples, data.num_classes)?,
                std_drift: drift,
                n: samples.len(),
            });
        }
    }
    Ok(cells)
}
