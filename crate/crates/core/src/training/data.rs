use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Rng, Tensor};
use crate::{Error, Result};

/// Synthetic latents: class `k` is a sinusoid with `k + 1` cycles per
/// sequence in every channel, with a random phase per channel, amplitude
/// `sqrt(2)` (unit variance) and additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub frames: usize,
    pub latent_channels: usize,
    pub noise_std: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            frames: 64,
            latent_channels: 16,
            noise_std: 0.05,
            train_size: 512,
            test_size: 64,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.latent_channels == 0 {
            return Err(Error::Config("dataset needs at least one class and one channel".into()));
        }
        if self.frames < 2 * (self.num_classes + 1) {
            return Err(Error::Config(format!(
                "{} frames cannot resolve {} frequency bins",
                self.frames, self.num_classes
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Frequency bin (cycles per sequence) of `class`.
    pub fn class_bin(&self, class: usize) -> usize {
        class + 1
    }

    pub fn noiseless(&self, class: usize, phases: &[f64]) -> Tensor {
        let (c, f) = (self.latent_channels, self.frames);
        let cycles = self.class_bin(class) as f64;
        Tensor::from_fn(&[c, f], |i| {
            let (ch, t) = (i / f, i % f);
            SQRT_2 * (2.0 * PI * cycles * t as f64 / f as f64 + phases[ch]).sin()
        })
    }

    pub fn sample(&self, class: usize, rng: &mut Rng) -> Tensor {
        let phases: Vec<f64> = (0..self.latent_channels).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect();
        let mut x = self.noiseless(class, &phases);
        for v in x.data_mut() {
            *v += self.noise_std * rng.normal();
        }
        x
    }

    /// `n` samples with classes drawn uniformly.
    pub fn generate(&self, n: usize, rng: &mut Rng) -> Dataset {
        let items = (0..n)
            .map(|_| {
                let class = rng.below(self.num_classes);
                (self.sample(class, rng), class)
            })
            .collect();
        Dataset { items }
    }

    /// Deterministic `(train, test)` splits.
    pub fn splits(&self, seed: u64) -> (Dataset, Dataset) {
        let mut rng = Rng::new(seed);
        let train = self.generate(self.train_size, &mut rng.fork(0));
        let test = self.generate(self.test_size, &mut rng.fork(1));
        (train, test)
    }
}

/// Latents `[channels, frames]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<(Tensor, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
