use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            p.check_same(g, "adamw")?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![x]));
        p
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let mut p = store(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            opt.step(&mut p, &store(0.0), 0.1).unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let mut p = store(2.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for k in 1..=3 {
            opt.step(&mut p, &store(0.0), 0.1).unwrap();
            let want = 2.0 * (1.0f64 - 0.1 * 0.01).powi(k);
            assert!((p.get("x").unwrap().item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_on_square_matches_hand_value() {
        let mut p = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        // f = x^2, g = 2: m_hat = 2, v_hat = 4.
        opt.step(&mut p, &store(2.0), 0.1).unwrap();
        let want = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 2.0 / (2.0 + 1e-8);
        let got = p.get("x").unwrap().item();
        assert!(got < 1.0);
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let mut p = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &store(1.0), 0.0).is_err());
        assert!(opt.step(&mut p, &store(1.0), -1e-3).is_err());
    }

    #[test]
    fn quadratic_loss_is_monotone_after_warmup() {
        let mut p = store(3.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let x = p.get("x").unwrap().item();
            losses.push(x * x);
            opt.step(&mut p, &store(2.0 * x), 0.01).unwrap();
        }
        assert!(losses[10..].windows(2).all(|w| w[1] <= w[0]));
    }
}
