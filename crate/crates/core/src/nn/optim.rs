use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{GradientSet, ParameterSet};
use crate::tensor::Tensor;

/// Momentum SGD with additive weight decay:
/// `v <- mu v + g + wd w`, `w <- w - lr v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

/// One optimizer step over every trainable parameter. Nothing is modified
/// if any gradient is non-finite.
pub fn sgd_step(params: &mut ParameterSet, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Graph(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(name.as_str(), format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        g.check_finite(name)?;
    }
    let (mu, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    for (name, w) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}
