use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::numerics::Tensor;

/// Learning-rate schedule and SGD settings for one training phase.
///
/// The rate is cosine-annealed per optimizer step:
/// `lr(k) = lr0 · ½(1 + cos(π·k/K))` for step `k` of `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub lr0: f64,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            epochs_first: 20,
            epochs_later: 10,
            batch_size: 32,
            momentum: 0.9,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(CilError::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn epochs_for(&self, session: usize) -> usize {
        if session == 0 {
            self.epochs_first
        } else {
            self.epochs_later
        }
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return self.lr0;
        }
        let frac = step as f64 / total_steps as f64;
        self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CilError::dim("sgd", &[params.len()], &[grads.len()]));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(CilError::dim("sgd", p.shape(), g.shape()));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
