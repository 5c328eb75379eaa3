use std::f64::consts::PI;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Cosine annealing without restarts: `lr0 · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Range("cosine schedule needs at least one epoch".into()));
    }
    if epoch > total {
        return Err(Error::Range(format!("epoch {epoch} beyond schedule length {total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos()))
}

/// SGD with heavy-ball momentum and coupled L2 weight decay, on a cosine
/// schedule indexed by epoch.
#[derive(Clone, Debug)]
pub struct Sgd<S: Real = f32> {
    momentum_buffers: Vec<Vec<S>>,
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl<S: Real> Sgd<S> {
    pub fn new(lr0: f64, momentum: f64, weight_decay: f64, total_epochs: usize) -> Result<Self> {
        if !(lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {lr0}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {weight_decay}")));
        }
        Ok(Sgd {
            momentum_buffers: Vec::new(),
            lr0,
            weight_decay,
            momentum,
            epoch: 0,
            total_epochs: total_epochs.max(1),
        })
    }

    pub fn lr(&self) -> Result<f64> {
        cosine_lr(self.epoch, self.total_epochs, self.lr0)
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// One update at the scheduled learning rate. Gradients are consumed.
    pub fn step(&mut self, params: &mut [Tensor<S>]) -> Result<()> {
        let lr = self.lr()?;
        self.step_with_lr(params, lr)
    }

    /// `v ← μ·v + g + wd·θ;  θ ← θ − lr·v`.
    pub fn step_with_lr(&mut self, params: &mut [Tensor<S>], lr: f64) -> Result<()> {
        if self.momentum_buffers.is_empty() {
            self.momentum_buffers = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        if self.momentum_buffers.len() != params.len() {
            return Err(Error::Contract("parameter list changed between optimizer steps".into()));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        for (p, buf) in params.iter_mut().zip(&mut self.momentum_buffers) {
            if buf.len() != p.len() {
                return Err(Error::Contract("momentum buffer shape differs from parameter".into()));
            }
            let grad = p.take_grad().expect("checked above");
            for ((theta, v), g) in p.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                let vel = self.momentum * v.as_f64() + g.as_f64() + self.weight_decay * theta.as_f64();
                *v = S::of(vel);
                *theta = S::of(theta.as_f64() - lr * vel);
            }
        }
        Ok(())
    }
}
