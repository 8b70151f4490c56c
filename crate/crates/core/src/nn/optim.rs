use serde::{Deserialize, Serialize};

use super::network::Network;
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { learning_rate: f64 },
    Adam { learning_rate: f64 },
}

impl OptimizerKind {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { learning_rate } | OptimizerKind::Adam { learning_rate } => learning_rate,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Adam moment buffers are created lazily on the first
/// step and must keep matching the parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct Optimizer<T = f32> {
    kind: OptimizerKind,
    steps: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        let lr = kind.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            steps: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradient buffers. Parameters
    /// without a buffer are treated as having zero gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<()> {
        let names = net.param_names();
        for (name, p) in names.iter().zip(net.params()) {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
                }
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { learning_rate } => {
                let lr = T::from_f64(learning_rate);
                for p in net.params_mut() {
                    let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
                    for (v, gv) in p.data_mut().iter_mut().zip(g) {
                        *v -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { learning_rate } => {
                if self.first_moment.is_empty() {
                    self.first_moment = net.params().map(|p| vec![T::zero(); p.len()]).collect();
                    self.second_moment = self.first_moment.clone();
                }
                if self.first_moment.len() != net.params().count()
                    || self.first_moment.iter().zip(net.params()).any(|(m, p)| m.len() != p.len())
                {
                    return Err(Error::State("optimizer moments do not match network parameters".into()));
                }
                let t = self.steps as i32;
                let b1 = T::from_f64(ADAM_BETA1);
                let b2 = T::from_f64(ADAM_BETA2);
                let eps = T::from_f64(ADAM_EPS);
                let one = T::one();
                let bias1 = one - b1.powi(t);
                let bias2 = one - b2.powi(t);
                let lr = T::from_f64(learning_rate);
                for ((p, m), v) in net
                    .params_mut()
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    let grad = p.grad().map(|g| g.to_vec());
                    for i in 0..m.len() {
                        let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                        m[i] = b1 * m[i] + (one - b1) * g;
                        v[i] = b2 * v[i] + (one - b2) * g * g;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
