//! Adam with decoupled weight decay over a list of flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(
                "weight_decay",
                format!("must be nonnegative, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }

    /// Learning rate for zero-based `step` out of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let frac = if total == 0 {
                    0.0
                } else {
                    (step as f64 / total as f64).min(1.0)
                };
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// First and second moment buffers, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(block_lens: &[usize]) -> Self {
        Self {
            t: 0,
            m: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(
        &mut self,
        cfg: &OptimizerConfig,
        lr: f64,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: self.m.len(),
                right: params.len().min(grads.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[b].len() {
                return Err(Error::DimensionMismatch {
                    context: "optimizer block",
                    expected: self.m[b].len(),
                    actual: p.len(),
                });
            }
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![4.0, -0.01, 0.0];
        opt.step(&cfg, 0.1, &mut [&mut p], &[&g]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-4);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(&[1]);
        let mut p = vec![2.0];
        opt.step(&cfg, 1e-3, &mut [&mut p], &[&[0.0]]).unwrap();
        assert_eq!(p[0], 2.0 - 1e-3 * 1e-4 * 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(&[2]);
        let mut p = vec![3.0, -1.0];
        for _ in 0..5000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&cfg, 1e-2, &mut [&mut p], &[&g]).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-2 && (p[1] + 0.5).abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimizerConfig {
            schedule: Schedule::Cosine,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0, 100), 1e-3);
        assert!((cfg.lr_at(50, 100) - 5e-4).abs() < 1e-15);
        assert!(cfg.lr_at(100, 100).abs() < 1e-15);
        assert_eq!(OptimizerConfig::default().lr_at(77, 100), 1e-3);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = OptimizerConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg = OptimizerConfig::default();
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
