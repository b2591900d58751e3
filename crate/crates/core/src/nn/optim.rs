//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
    RmsProp,
    AdaGrad,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adam,
        OptimizerKind::SgdMomentum,
        OptimizerKind::RmsProp,
        OptimizerKind::AdaGrad,
    ];

    /// Conventional learning rate when nothing else is configured. Adam uses
    /// `adam_lr`; the others use their customary library defaults.
    pub fn default_lr(self, adam_lr: f64) -> f64 {
        match self {
            OptimizerKind::Adam => adam_lr,
            OptimizerKind::SgdMomentum => 1e-2,
            OptimizerKind::RmsProp => 1e-3,
            OptimizerKind::AdaGrad => 1e-3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::RmsProp => "rms_prop",
            OptimizerKind::AdaGrad => "ada_grad",
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    /// `v <- mu v - lr g; theta <- theta + v`.
    SgdMomentum {
        lr: f64,
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
    RmsProp {
        lr: f64,
        rho: f64,
        epsilon: f64,
        mean_square: Vec<Vec<f64>>,
    },
    AdaGrad {
        lr: f64,
        epsilon: f64,
        accumulator: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(sizes, lr)),
            OptimizerKind::SgdMomentum => Optimizer::SgdMomentum {
                lr,
                momentum: 0.9,
                velocity: zeros(),
            },
            OptimizerKind::RmsProp => Optimizer::RmsProp {
                lr,
                rho: 0.9,
                epsilon: 1e-8,
                mean_square: zeros(),
            },
            OptimizerKind::AdaGrad => Optimizer::AdaGrad {
                lr,
                epsilon: 1e-8,
                accumulator: zeros(),
            },
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        match self {
            Optimizer::Adam(s) => s.step(params, grads),
            Optimizer::SgdMomentum { lr, momentum, velocity } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity) {
                    for i in 0..p.len() {
                        v[i] = *momentum * v[i] - *lr * g[i];
                        p[i] += v[i];
                    }
                }
            }
            Optimizer::RmsProp {
                lr,
                rho,
                epsilon,
                mean_square,
            } => {
                for ((p, g), s) in params.iter_mut().zip(grads).zip(mean_square) {
                    for i in 0..p.len() {
                        s[i] = *rho * s[i] + (1.0 - *rho) * g[i] * g[i];
                        p[i] -= *lr * g[i] / (s[i].sqrt() + *epsilon);
                    }
                }
            }
            Optimizer::AdaGrad {
                lr,
                epsilon,
                accumulator,
            } => {
                for ((p, g), a) in params.iter_mut().zip(grads).zip(accumulator) {
                    for i in 0..p.len() {
                        a[i] += g[i] * g[i];
                        p[i] -= *lr * g[i] / (a[i].sqrt() + *epsilon);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adam written out for a single scalar.
    fn adam_oracle(theta0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
        let mut out = Vec::new();
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn first_adam_step_matches_closed_form() {
        let mut s = AdamState::new(&[1], 1e-4);
        let mut theta = [1.0];
        s.step(&mut [&mut theta[..]], &[&[0.5]]);
        let expect = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((theta[0] - expect).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_trace_matches_oracle() {
        let grads = [0.5, -0.2, 0.9, 0.0, 1e-3, -3.0];
        let expect = adam_oracle(1.0, &grads, 1e-3);
        let mut s = AdamState::new(&[1], 1e-3);
        let mut theta = [1.0];
        for (g, e) in grads.iter().zip(&expect) {
            s.step(&mut [&mut theta[..]], &[&[*g]]);
            assert!((theta[0] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn every_optimizer_decreases_a_quadratic() {
        for kind in OptimizerKind::ALL {
            let mut opt = Optimizer::new(kind, kind.default_lr(1e-2), &[2]);
            let mut theta = [3.0, -2.0];
            let f = |t: &[f64; 2]| t[0] * t[0] + 4.0 * t[1] * t[1];
            let start = f(&theta);
            for _ in 0..200 {
                let g = [2.0 * theta[0], 8.0 * theta[1]];
                opt.step(&mut [&mut theta[..]], &[&g[..]]);
            }
            assert!(f(&theta) < start, "{kind:?} did not decrease: {}", f(&theta));
        }
    }

    #[test]
    fn sgd_momentum_first_steps_by_hand() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.1, &[1]);
        let mut theta = [1.0];
        opt.step(&mut [&mut theta[..]], &[&[1.0]]);
        assert!((theta[0] - 0.9).abs() < 1e-15);
        opt.step(&mut [&mut theta[..]], &[&[1.0]]);
        // v = 0.9 * -0.1 - 0.1 = -0.19
        assert!((theta[0] - 0.71).abs() < 1e-15);
    }
}
