//! Plain gradient descent, optionally with heavy-ball momentum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `p <- p - lr * g`, in place.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f32) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::config(format!(
            "sgd_step shape mismatch: param {:?}, grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// SGD with per-parameter velocity buffers keyed by parameter index.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<usize, Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: usize, param: &mut Tensor, grad: &Tensor, lr: f32) -> Result<()> {
        let SgdConfig {
            momentum,
            weight_decay,
        } = self.config;
        if momentum == 0.0 && weight_decay == 0.0 {
            return sgd_step(param, grad, lr);
        }
        if param.shape() != grad.shape() {
            return Err(Error::config("sgd momentum step shape mismatch"));
        }
        let v = self
            .velocity
            .entry(key)
            .or_insert_with(|| vec![0.0; param.numel()]);
        for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            let d = g + weight_decay * *p;
            *v = momentum * *v + d;
            *p -= lr * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let mut p = Tensor::scalar(1.0);
        sgd_step(&mut p, &Tensor::scalar(1.1), 0.1).unwrap();
        assert!((p.item() - 0.89).abs() < 1e-7);
    }

    #[test]
    fn zero_rate_or_zero_grad_is_noop() {
        let orig = Tensor::from_fn(&[4], |i| i as f32 - 1.5);
        let mut p = orig.clone();
        sgd_step(&mut p, &Tensor::full(&[4], 3.0), 0.0).unwrap();
        assert_eq!(p, orig);
        sgd_step(&mut p, &Tensor::zeros(&[4]), 0.5).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.5,
            weight_decay: 0.0,
        });
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        opt.step(0, &mut p, &g, 1.0).unwrap();
        opt.step(0, &mut p, &g, 1.0).unwrap();
        assert_eq!(p.item(), -2.5);
    }
}
