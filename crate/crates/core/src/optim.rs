//! First-order optimizers over flat parameter vectors.
//!
//! Both parties only ever see gradients in the adapter flatten layout, so
//! the optimizer works on plain slices and returns the additive delta for
//! `apply_update`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    /// Plain SGD, the default for protocol-equivalence runs.
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(self) -> Result<()> {
        let lr = match self {
            OptimizerConfig::Sgd { lr, momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidParameter("momentum must be in [0, 1)"));
                }
                lr
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                    return Err(Error::InvalidParameter("adam betas must be in [0, 1)"));
                }
                if !(eps.is_finite() && eps > 0.0) {
                    return Err(Error::InvalidParameter("adam eps must be positive"));
                }
                lr
            }
        };
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// First/second moment state; empty for plain SGD.
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    params: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: usize) -> Result<Self> {
        config.validate()?;
        let state = match config {
            OptimizerConfig::Sgd { momentum, .. } if momentum == 0.0 => 0,
            _ => params,
        };
        Ok(Self {
            config,
            m: vec![0.0; state],
            v: vec![0.0; state],
            t: 0,
            params,
        })
    }

    /// Consume one gradient, return the parameter delta.
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.params {
            return Err(Error::len("gradient", self.params, grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                if momentum == 0.0 {
                    return Ok(grad.iter().map(|g| -lr * g).collect());
                }
                let mut delta = Vec::with_capacity(self.params);
                for (m, &g) in self.m.iter_mut().zip(grad) {
                    *m = momentum * *m + g;
                    delta.push(-lr * *m);
                }
                Ok(delta)
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - math::powi(beta1, self.t);
                let bc2 = 1.0 - math::powi(beta2, self.t);
                let mut delta = Vec::with_capacity(self.params);
                for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    delta.push(-lr * m_hat / (math::sqrt(v_hat) + eps));
                }
                Ok(delta)
            }
        }
    }
}
