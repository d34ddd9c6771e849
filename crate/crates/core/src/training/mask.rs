use serde::{Deserialize, Serialize};

use crate::autodiff::Rng;
use crate::{Error, Result};

/// Span-mask layout: the masked fraction is drawn from
/// `[ratio_min, ratio_max]` and laid out as runs of at least
/// `min_span_frames` frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// 0.2 s at 50 Hz.
    pub min_span_frames: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio_min: 0.25,
            ratio_max: 1.0,
            min_span_frames: 10,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0) {
            return Err(Error::Config(format!(
                "mask ratios must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.ratio_min, self.ratio_max
            )));
        }
        if self.min_span_frames == 0 {
            return Err(Error::Config("min_span_frames must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a ratio uniformly from the spec range and lays out a mask
/// (`true` = noised frame).
pub fn sample_mask(frames: usize, spec: &MaskSpec, rng: &mut Rng) -> Result<Vec<bool>> {
    spec.validate()?;
    let ratio = rng.uniform_range(spec.ratio_min, spec.ratio_max);
    sample_mask_with_ratio(frames, ratio, spec, rng)
}

/// Masks `ceil(ratio * frames)` frames (at least one span) as `k` runs, each
/// at least `min_span_frames` long, separated by at least one clean frame.
/// `k`, the run lengths and the gaps are random.
pub fn sample_mask_with_ratio(frames: usize, ratio: f64, spec: &MaskSpec, rng: &mut Rng) -> Result<Vec<bool>> {
    let span = spec.min_span_frames;
    if frames < span {
        return Err(Error::InvalidArgument(format!(
            "{frames} frames cannot hold a {span}-frame span"
        )));
    }
    let masked = ((ratio * frames as f64).ceil() as usize).clamp(span, frames);
    if masked == frames {
        return Ok(vec![true; frames]);
    }
    let clean = frames - masked;
    let max_runs = (masked / span).min(clean + 1);
    let runs = 1 + rng.below(max_runs);

    let mut lengths = vec![span; runs];
    for _ in 0..masked - runs * span {
        lengths[rng.below(runs)] += 1;
    }
    // Interior gaps need one clean frame so runs stay separate.
    let mut gaps = vec![0usize; runs + 1];
    for g in gaps.iter_mut().take(runs).skip(1) {
        *g = 1;
    }
    for _ in 0..clean - (runs - 1) {
        gaps[rng.below(runs + 1)] += 1;
    }

    let mut mask = Vec::with_capacity(frames);
    for i in 0..runs {
        mask.extend(std::iter::repeat_n(false, gaps[i]));
        mask.extend(std::iter::repeat_n(true, lengths[i]));
    }
    mask.extend(std::iter::repeat_n(false, gaps[runs]));
    Ok(mask)
}

/// Maximal masked runs as `(start, len)`.
pub fn mask_runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push((start, i - start));
        } else {
            i += 1;
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_one_masks_everything() {
        let m = sample_mask_with_ratio(64, 1.0, &MaskSpec::default(), &mut Rng::new(0)).unwrap();
        assert!(m.iter().all(|&b| b));
    }

    #[test]
    fn quarter_ratio_on_64_frames() {
        let spec = MaskSpec::default();
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let m = sample_mask_with_ratio(64, 0.25, &spec, &mut rng).unwrap();
            let n = m.iter().filter(|&&b| b).count();
            assert!((6..=26).contains(&n), "{n}");
            for (start, len) in mask_runs(&m) {
                assert!(len >= 10 || start == 0 || start + len == 64);
            }
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        assert!(sample_mask(9, &MaskSpec::default(), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn runs_of_known_mask() {
        let m = [true, true, false, true, false, false, true];
        assert_eq!(mask_runs(&m), vec![(0, 2), (3, 1), (6, 1)]);
    }
}
