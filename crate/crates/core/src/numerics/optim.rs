use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named parameter tensor together with its gradient.
pub struct Param<'a> {
    pub name: String,
    pub value: &'a mut [f32],
    pub grad: &'a [f32],
}

/// Step decay: `lr(epoch) = lr₀ · γ^⌊epoch / step_epochs⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub step_epochs: usize,
    pub gamma: f32,
}

impl LrSchedule {
    pub const CONSTANT: LrSchedule = LrSchedule {
        step_epochs: usize::MAX,
        gamma: 1.0,
    };

    pub fn lr_at(&self, lr0: f32, epoch: usize) -> f32 {
        let k = epoch / self.step_epochs.max(1);
        lr0 * self.gamma.powi(k.min(i32::MAX as usize) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam { beta1: f32, beta2: f32, eps: f32 },
    SgdMomentum { momentum: f32 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub schedule: LrSchedule,
}

/// Optimizer with its per-parameter state. Buffers are allocated on the first
/// step and must keep matching the parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    last_epoch: usize,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        // lr = 0 is accepted: it is how "train without moving" runs are expressed.
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                config.lr
            )));
        }
        if let OptimizerKind::SgdMomentum { momentum } = config.kind {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::InvalidArgument(format!(
                    "momentum must lie in [0, 1), got {momentum}"
                )));
            }
        }
        Ok(Self {
            config,
            steps: 0,
            last_epoch: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.config.schedule.lr_at(self.config.lr, epoch)
    }

    /// State buffer footprint in floats (moments or velocities).
    pub fn state_len(&self) -> usize {
        self.first.iter().chain(&self.second).map(Vec::len).sum()
    }

    pub fn step(&mut self, epoch: usize, params: &mut [Param<'_>]) -> Result<()> {
        if epoch < self.last_epoch {
            return Err(Error::InvalidArgument(format!(
                "epoch went backwards ({} after {})",
                epoch, self.last_epoch
            )));
        }
        for p in params.iter() {
            if p.value.len() != p.grad.len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left: (p.value.len(), 1),
                    right: (p.grad.len(), 1),
                });
            }
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at index {i} is {}",
                    p.name, p.grad[i]
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(b, p)| b.len() != p.value.len())
        {
            return Err(Error::Shape {
                op: "optimizer_step (state buffers)",
                left: (self.first.len(), 1),
                right: (params.len(), 1),
            });
        }

        self.last_epoch = epoch;
        self.steps += 1;
        let lr = self.lr_at(epoch);
        match self.config.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps.min(i32::MAX as u64) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        m[i] = flush(beta1 * m[i] + (1.0 - beta1) * g);
                        v[i] = flush(beta2 * v[i] + (1.0 - beta2) * g * g);
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    for ((w, u), &g) in p.value.iter_mut().zip(vel.iter_mut()).zip(p.grad) {
                        *u = flush(momentum * *u + g);
                        *w -= lr * *u;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Moments of dead units decay geometrically into the subnormal range, where
/// x86 arithmetic is two orders of magnitude slower.
fn flush(x: f32) -> f32 {
    if x.abs() < f32::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd(lr: f32) -> Optimizer {
        Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::SgdMomentum { momentum: 0.9 },
            lr,
            schedule: LrSchedule::CONSTANT,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_sgd_is_noop() {
        let mut opt = sgd(0.1);
        let mut w = vec![1.0f32, -2.0, 3.0];
        let g = vec![0.0f32; 3];
        for epoch in 0..3 {
            opt.step(
                epoch,
                &mut [Param {
                    name: "w".into(),
                    value: &mut w,
                    grad: &g,
                }],
            )
            .unwrap();
        }
        assert_eq!(w, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn zero_gradient_adam_is_noop() {
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::ADAM,
            lr: 1e-3,
            schedule: LrSchedule::CONSTANT,
        })
        .unwrap();
        let mut w = vec![0.5f32; 4];
        let g = vec![0.0f32; 4];
        opt.step(
            0,
            &mut [Param {
                name: "w".into(),
                value: &mut w,
                grad: &g,
            }],
        )
        .unwrap();
        assert_eq!(w, vec![0.5; 4]);
    }

    #[test]
    fn single_adam_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = −lr · 1/(1 + ε).
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::ADAM,
            lr: 1e-3,
            schedule: LrSchedule::CONSTANT,
        })
        .unwrap();
        let mut w = vec![0.0f32];
        opt.step(
            0,
            &mut [Param {
                name: "w".into(),
                value: &mut w,
                grad: &[1.0],
            }],
        )
        .unwrap();
        assert!((w[0] + 1e-3).abs() < 1e-9, "{}", w[0]);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut opt = sgd(0.1);
        let mut w = vec![0.0f32];
        for _ in 0..2 {
            opt.step(
                0,
                &mut [Param {
                    name: "w".into(),
                    value: &mut w,
                    grad: &[1.0],
                }],
            )
            .unwrap();
        }
        // v1 = 1, v2 = 0.9 + 1 = 1.9; w = −0.1 · (1 + 1.9)
        assert!((w[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn step_schedule_decays_every_three_epochs() {
        let s = LrSchedule {
            step_epochs: 3,
            gamma: 0.1,
        };
        for e in 0..3 {
            assert_eq!(s.lr_at(1e-3, e), 1e-3);
        }
        assert!((s.lr_at(1e-3, 3) - 1e-4).abs() < 1e-10);
        assert!((s.lr_at(1e-3, 6) - 1e-5).abs() < 1e-11);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut opt = sgd(0.1);
        let mut w = vec![0.0f32; 2];
        let err = opt
            .step(
                0,
                &mut [Param {
                    name: "fc.weight".into(),
                    value: &mut w,
                    grad: &[0.0, f32::NAN],
                }],
            )
            .unwrap_err();
        assert!(err.to_string().contains("fc.weight"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = sgd(0.1);
        let mut w = vec![0.0f32; 2];
        assert!(opt
            .step(
                0,
                &mut [Param {
                    name: "w".into(),
                    value: &mut w,
                    grad: &[0.0]
                }]
            )
            .is_err());
    }

    #[test]
    fn buffers_must_keep_shape() {
        let mut opt = sgd(0.1);
        let mut w = vec![0.0f32; 2];
        opt.step(
            0,
            &mut [Param {
                name: "w".into(),
                value: &mut w,
                grad: &[0.0, 0.0],
            }],
        )
        .unwrap();
        let mut w3 = vec![0.0f32; 3];
        assert!(opt
            .step(
                0,
                &mut [Param {
                    name: "w".into(),
                    value: &mut w3,
                    grad: &[0.0; 3]
                }]
            )
            .is_err());
    }

    #[test]
    fn epoch_must_not_decrease() {
        let mut opt = sgd(0.1);
        let mut w = vec![0.0f32];
        opt.step(
            2,
            &mut [Param {
                name: "w".into(),
                value: &mut w,
                grad: &[0.0],
            }],
        )
        .unwrap();
        assert!(opt
            .step(
                1,
                &mut [Param {
                    name: "w".into(),
                    value: &mut w,
                    grad: &[0.0]
                }]
            )
            .is_err());
    }

    #[test]
    fn decayed_moments_reach_exact_zero() {
        let mut opt = sgd(1e-3);
        let mut w = vec![0.0f32];
        opt.step(
            0,
            &mut [Param {
                name: "w".into(),
                value: &mut w,
                grad: &[1e-3],
            }],
        )
        .unwrap();
        for _ in 0..1000 {
            opt.step(
                0,
                &mut [Param {
                    name: "w".into(),
                    value: &mut w,
                    grad: &[0.0],
                }],
            )
            .unwrap();
        }
        assert_eq!(opt.first[0][0], 0.0);
    }

    #[test]
    fn negative_lr_rejected() {
        assert!(Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::ADAM,
            lr: -1.0,
            schedule: LrSchedule::CONSTANT,
        })
        .is_err());
    }
}
