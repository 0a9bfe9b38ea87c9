//! SGD with Nesterov momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Velocity buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct NesterovSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl NesterovSgd {
    pub fn new(param_sizes: &[usize], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over every parameter:
    ///
    /// ```text
    /// d = g + wd·p
    /// v ← μ·v + d
    /// p ← p − lr·(d + μ·v)
    /// ```
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + wd * *pi;
                *vi = mu * *vi + d;
                *pi -= lr * (d + mu * *vi);
            }
        }
        Ok(())
    }
}
