//! Full-batch Adam on the mean squared error.

use serde::{Deserialize, Serialize};

use crate::don::{init_params, mse_loss_and_grad, Batch, DonArchitecture, DonParams};
use crate::error::{Error, Result};
use crate::patch::ObservationSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((x, g), (m, v)) in theta.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            if *m != 0.0 {
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Trains from `params` in place; returns the loss recorded before each update.
pub fn train_from(params: &mut DonParams, arch: &DonArchitecture, batch: &Batch, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut adam = Adam::new(params.len(), cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let g = mse_loss_and_grad(params, arch, batch)?;
        if !g.loss.is_finite() {
            return Err(Error::Divergence { step: epoch });
        }
        history.push(g.loss);
        adam.step(params.values_mut(), &g.values);
    }
    Ok(history)
}

/// Glorot initialization from `cfg.seed`, then `cfg.epochs` Adam steps.
pub fn train_don(arch: &DonArchitecture, dataset: &ObservationSet, cfg: &TrainConfig) -> Result<(DonParams, Vec<f64>)> {
    let batch = Batch::from_observations(dataset);
    let mut params = init_params(arch, cfg.seed);
    let history = train_from(&mut params, arch, &batch, cfg)?;
    Ok((params, history))
}
