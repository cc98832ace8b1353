use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::Params;

/// RMSprop with a per-parameter squared-gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// One accumulator per trainable tensor, same order as `Params::tensors`.
    pub acc: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(params: &Params, lr: f64) -> Self {
        Self {
            lr,
            rho: 0.9,
            eps: 1e-8,
            acc: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        let gs = grads.tensors();
        let ps = params.tensors_mut();
        if ps.len() != self.acc.len() || gs.len() != self.acc.len() {
            return Err(Error::Shape(
                "optimizer state does not match parameters".into(),
            ));
        }
        for ((p, g), acc) in ps.into_iter().zip(gs).zip(self.acc.iter_mut()) {
            if p.len() != g.len() || p.len() != acc.len() {
                return Err(Error::Shape("optimizer tensor size mismatch".into()));
            }
            for ((w, gi), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a = self.rho * *a + (1.0 - self.rho) * gi * gi;
                *w -= self.lr * gi / (*a + self.eps).sqrt();
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr: 0.0,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one epoch's monitored loss; returns the learning rate to use next.
    /// Only a strict decrease resets the wait counter.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}
