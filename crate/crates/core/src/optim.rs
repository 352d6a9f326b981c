//! SGD with momentum and coupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
    learning_rate: f64,
}

impl SgdState {
    pub fn new(params: &[&Tensor], learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::config("lr", "learning rate must be finite and non-negative"));
        }
        Ok(Self {
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            momentum,
            weight_decay,
            learning_rate,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v ← μ·v + (g + λ·p)`, then `p ← p − η·v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "sgd: {} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::dim("sgd: parameter and gradient lengths differ"));
            }
            for ((p, g), v) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = self.momentum * *v + (g + self.weight_decay * *p);
                *p -= self.learning_rate * *v;
            }
        }
        Ok(())
    }
}
