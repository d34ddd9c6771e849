use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Guidance scale `w`, rescale factor `phi` and the negative prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w: f64,
    pub phi: f64,
    /// Negative-prompt tokens; empty is the unconditional branch.
    #[serde(default)]
    pub negative: Vec<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 3.0,
            phi: 0.0,
            negative: Vec::new(),
        }
    }
}

impl GuidanceConfig {
    pub fn new(w: f64, phi: f64) -> Self {
        Self {
            w,
            phi,
            negative: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 1.0 && self.w.is_finite()) {
            return Err(Error::InvalidArgument(format!("guidance scale must be >= 1, got {}", self.w)));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::InvalidArgument(format!("rescale factor must be in [0, 1], got {}", self.phi)));
        }
        Ok(())
    }
}

/// `v_neg + w (v_pos - v_neg)`; returns `v_pos` itself when `w == 1`.
pub fn cfg_combine(v_pos: &Tensor, v_neg: &Tensor, w: f64) -> Result<Tensor> {
    v_pos.check_same(v_neg, "cfg_combine")?;
    if w == 1.0 {
        return Ok(v_pos.clone());
    }
    v_pos.zip_map(v_neg, "cfg_combine", |p, n| n + w * (p - n))
}

/// Result of [`cfg_rescale`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub v: Tensor,
    /// `std(v_cfg)` was below `1e-12`, so `v_cfg` was returned unchanged.
    pub degenerate: bool,
}

/// Blends `v_cfg` with its copy rescaled to the standard deviation of
/// `v_pos`: `phi * v_cfg * std(v_pos) / std(v_cfg) + (1 - phi) * v_cfg`.
///
/// Standard deviations are global population values over all elements.
/// Evaluated as `v_cfg * (phi * ratio + 1 - phi)`, so the output is a
/// positive multiple of `v_cfg`; with `phi == 0` or a unit ratio it is
/// `v_cfg` bitwise.
pub fn cfg_rescale(v_cfg: &Tensor, v_pos: &Tensor, phi: f64) -> Result<Rescaled> {
    v_cfg.check_same(v_pos, "cfg_rescale")?;
    let std_cfg = v_cfg.std();
    if std_cfg < 1e-12 {
        return Ok(Rescaled {
            v: v_cfg.clone(),
            degenerate: true,
        });
    }
    let ratio = v_pos.std() / std_cfg;
    if phi == 0.0 || ratio == 1.0 {
        return Ok(Rescaled {
            v: v_cfg.clone(),
            degenerate: false,
        });
    }
    let factor = phi * ratio + (1.0 - phi);
    Ok(Rescaled {
        v: v_cfg.scale(factor),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Rng;

    fn randn(seed: u64, n: usize) -> Tensor {
        Tensor::vector(Rng::new(seed).normal_vec(n))
    }

    #[test]
    fn combine_examples() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let n = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(cfg_combine(&p, &n, 2.0).unwrap().data(), &[1.0, 4.0]);
        assert!(cfg_combine(&p, &n, 1.0).unwrap().bit_eq(&p));
        let z = Tensor::zeros(&[2]);
        assert_eq!(cfg_combine(&p, &z, 3.0).unwrap().data(), &[3.0, 6.0]);
        for w in [1.0, 2.5, 7.0] {
            assert!(cfg_combine(&p, &p, w).unwrap().bit_eq(&p));
        }
    }

    #[test]
    fn rescale_hand_value() {
        // std(v_pos) = 1, std(v_cfg) = 2: factor 0.5 * 0.5 + 0.5 = 0.75.
        let v_pos = Tensor::vector(vec![1.0, -1.0, 1.0, -1.0]);
        let v_cfg = Tensor::vector(vec![2.0, -2.0, -2.0, 2.0]);
        let r = cfg_rescale(&v_cfg, &v_pos, 0.5).unwrap();
        assert_eq!(r.v.data(), &[1.5, -1.5, -1.5, 1.5]);
    }

    #[test]
    fn rescale_endpoints() {
        let v_pos = randn(1, 64);
        let v_cfg = randn(2, 64).scale(3.0);
        assert!(cfg_rescale(&v_cfg, &v_pos, 0.0).unwrap().v.bit_eq(&v_cfg));
        let full = cfg_rescale(&v_cfg, &v_pos, 1.0).unwrap().v;
        assert!((full.std() - v_pos.std()).abs() < 1e-10);
        assert!(cfg_rescale(&v_pos, &v_pos, 0.75).unwrap().v.bit_eq(&v_pos));
    }

    #[test]
    fn degenerate_input_is_flagged() {
        let z = Tensor::zeros(&[8]);
        let r = cfg_rescale(&z, &randn(0, 8), 0.7).unwrap();
        assert!(r.degenerate && r.v.bit_eq(&z));
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::new(3.0, 0.75).validate().is_ok());
        assert!(GuidanceConfig::new(0.5, 0.0).validate().is_err());
        assert!(GuidanceConfig::new(1.0, 1.5).validate().is_err());
        assert!(GuidanceConfig::new(f64::NAN, 0.0).validate().is_err());
    }
}
