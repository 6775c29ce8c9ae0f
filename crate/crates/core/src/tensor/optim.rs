use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Update per parameter: `d = g + wd·p`, `buf = μ·buf + d`, `p -= lr·buf`.
/// Momentum buffers are keyed by parameter name and created on first use.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "sgd: lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        })
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::dim(
                "sgd_step",
                format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
            ));
        }
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        for ((p, &g), b) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *b = self.momentum * *b + d;
            *p -= self.lr * *b;
        }
        Ok(())
    }

    /// Drops momentum state for every parameter whose name starts with `prefix`.
    pub fn reset_prefix(&mut self, prefix: &str) {
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }
}
