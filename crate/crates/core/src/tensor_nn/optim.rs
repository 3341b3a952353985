//! Optimizers: momentum SGD with per-epoch exponential learning-rate decay,
//! and bias-corrected Adam.

use super::tensor::Tensor;
use super::Parameter;
use crate::scalar::{real, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    MomentumSgd,
    Adam,
}

/// Scalar-free optimizer settings as they appear in configs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum coefficient (momentum SGD only).
    pub momentum: f64,
    /// Multiplied into the learning rate at every epoch boundary.
    pub lr_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::MomentumSgd, learning_rate: 1e-3, momentum: 0.9, lr_decay: 0.95 }
    }
}

impl OptimizerConfig {
    pub fn build<S: Scalar>(&self) -> Optimizer<S> {
        match self.kind {
            OptimizerKind::MomentumSgd => Optimizer::Momentum(MomentumSgd {
                lr: real(self.learning_rate),
                momentum: real(self.momentum),
                lr_decay: real(self.lr_decay),
                velocity: Vec::new(),
            }),
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                lr: real(self.learning_rate),
                beta1: real(0.9),
                beta2: real(0.999),
                eps: real(1e-8),
                t: 0,
                first: Vec::new(),
                second: Vec::new(),
            }),
        }
    }
}

/// `v <- mu*v + g; theta <- theta - alpha*v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd<S> {
    pub lr: S,
    pub momentum: S,
    pub lr_decay: S,
    velocity: Vec<Tensor<S>>,
}

/// Standard bias-corrected first/second-moment update.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub enum Optimizer<S> {
    Momentum(MomentumSgd<S>),
    Adam(Adam<S>),
}

impl<S: Scalar> Optimizer<S> {
    /// Apply one update from the accumulated gradients. The parameter list
    /// must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Parameter<S>]) {
        match self {
            Optimizer::Momentum(m) => {
                if m.velocity.is_empty() {
                    m.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
                }
                assert_eq!(m.velocity.len(), params.len(), "parameter list changed size");
                for (p, v) in params.iter_mut().zip(m.velocity.iter_mut()) {
                    for ((th, &g), vel) in
                        p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut())
                    {
                        *vel = m.momentum * *vel + g;
                        *th = *th - m.lr * *vel;
                    }
                }
            }
            Optimizer::Adam(a) => {
                if a.first.is_empty() {
                    a.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
                    a.second = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
                }
                assert_eq!(a.first.len(), params.len(), "parameter list changed size");
                a.t += 1;
                let t = a.t as i32;
                let bc1 = S::one() - a.beta1.powi(t);
                let bc2 = S::one() - a.beta2.powi(t);
                for (p, (m1, m2)) in
                    params.iter_mut().zip(a.first.iter_mut().zip(a.second.iter_mut()))
                {
                    for (((th, &g), m), v) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m1.data_mut())
                        .zip(m2.data_mut())
                    {
                        *m = a.beta1 * *m + (S::one() - a.beta1) * g;
                        *v = a.beta2 * *v + (S::one() - a.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *th = *th - a.lr * mhat / (vhat.sqrt() + a.eps);
                    }
                }
            }
        }
    }

    /// Exponential learning-rate decay, applied at epoch boundaries.
    pub fn end_epoch(&mut self) {
        if let Optimizer::Momentum(m) = self {
            m.lr = m.lr * m.lr_decay;
        }
    }

    pub fn learning_rate(&self) -> S {
        match self {
            Optimizer::Momentum(m) => m.lr,
            Optimizer::Adam(a) => a.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new(Tensor::from_vec(&[1], vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_param(1.25);
        let mut opt = OptimizerConfig::default().build::<f64>();
        opt.step(&mut [&mut p]);
        assert_eq!(p.value.data(), &[1.25]);
    }

    #[test]
    fn single_momentum_step_arithmetic() {
        let mut p = scalar_param(1.0);
        p.grad.data_mut()[0] = 1.0;
        let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.9, ..Default::default() };
        let mut opt = cfg.build::<f64>();
        opt.step(&mut [&mut p]);
        // v' = 0.9*0 + 1 = 1, theta' = 1 - 0.1*1 = 0.9.
        assert_eq!(p.value.data(), &[0.9]);
    }

    #[test]
    fn lr_decays_per_epoch() {
        let mut opt = OptimizerConfig { learning_rate: 1.0, lr_decay: 0.95, ..Default::default() }
            .build::<f64>();
        opt.end_epoch();
        opt.end_epoch();
        assert!((opt.learning_rate() - 0.9025).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_param(0.0);
        p.grad.data_mut()[0] = 0.5;
        let cfg = OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 0.01, ..Default::default() };
        let mut opt = cfg.build::<f64>();
        opt.step(&mut [&mut p]);
        // Bias correction makes the first step ~ -lr * sign(g).
        assert!((p.value.data()[0] + 0.01).abs() < 1e-6);
    }
}
