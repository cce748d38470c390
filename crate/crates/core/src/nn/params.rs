use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::graph::{NetworkGraph, ParamInit};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Trainable parameters plus non-trainable buffers (normalization running
/// statistics), keyed `"<node>.<param>"`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// Fan-in scaled Gaussian weights (variance `2 / fan_in`), zero biases,
    /// unit normalization scales.
    pub fn init(graph: &NetworkGraph, rng: &mut SeededRng) -> Self {
        let (params, buffers) = graph.param_decls();
        let make = |decl: &crate::nn::ParamDecl, rng: &mut SeededRng| {
            let n: usize = decl.shape.iter().product();
            let data = match decl.init {
                ParamInit::Zeros => vec![0.0; n],
                ParamInit::Ones => vec![1.0; n],
                ParamInit::FanInGaussian => {
                    let std = (2.0 / decl.fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                }
            };
            Tensor::new(decl.shape.clone(), data).expect("declared shapes are non-empty")
        };
        let mut set = ParameterSet::default();
        for d in &params {
            let t = make(d, rng);
            set.params.insert(d.name.clone(), t);
        }
        for d in &buffers {
            let t = make(d, rng);
            set.buffers.insert(d.name.clone(), t);
        }
        set
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub(crate) fn param(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self.params.get_mut(name) {
            Some(t) => Some(t),
            None => self.buffers.get_mut(name),
        }
    }

    /// Trainable parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Parameters followed by buffers, each in name order.
    pub fn all(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    /// Sets every trainable parameter entry to `value`.
    pub fn fill(&mut self, value: f64) {
        for t in self.params.values_mut() {
            t.data_mut().fill(value);
        }
    }

    /// Overwrites an existing parameter or buffer, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// Gradients with exactly the keys and shapes of a [`ParameterSet`]'s
/// trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub(crate) fn slot(&mut self, name: &str) -> Result<&mut Tensor> {
        self.grads
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("missing gradient slot `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn norm_sq(&self) -> f64 {
        self.grads.values().map(Tensor::sum_sq).sum()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (k, g) in &mut self.grads {
            if let Some(o) = other.grads.get(k) {
                g.add_assign(o);
            }
        }
    }

    /// True when keys and shapes match `params` exactly.
    pub fn mirrors(&self, params: &ParameterSet) -> bool {
        self.grads.len() == params.iter().count()
            && params
                .iter()
                .all(|(k, v)| self.grads.get(k).is_some_and(|g| g.shape() == v.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvSpec, LayerKind};
    use crate::seeded_rng;

    #[test]
    fn init_declares_all_parameters() {
        let mut g = NetworkGraph::new();
        let x = g.add("x", LayerKind::Input { shape: vec![2, 4, 4] }, &[]).unwrap();
        let c = g.add("c", LayerKind::Conv(ConvSpec::new(2, 3, 3, 1)), &[x]).unwrap();
        let b = g.add("bn", LayerKind::BatchNorm { channels: 3 }, &[c]).unwrap();
        g.add("fc", LayerKind::Linear { d_in: 48, d_out: 5 }, &[b]).unwrap();
        let p = ParameterSet::init(&g, &mut seeded_rng(0));
        let names: Vec<_> = p.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(names, ["bn.beta", "bn.gamma", "c.weight", "fc.bias", "fc.weight"]);
        assert_eq!(p.get("bn.running_var").unwrap().data(), &[1.0; 3]);
        assert_eq!(p.num_params(), 3 + 3 + 54 + 5 + 240);
        let grads = GradientSet::zeros_like(&p);
        assert!(grads.mirrors(&p));
    }

    #[test]
    fn init_is_deterministic() {
        let mut g = NetworkGraph::new();
        let x = g.add("x", LayerKind::Input { shape: vec![4] }, &[]).unwrap();
        g.add("fc", LayerKind::Linear { d_in: 4, d_out: 4 }, &[x]).unwrap();
        let a = ParameterSet::init(&g, &mut seeded_rng(7));
        let b = ParameterSet::init(&g, &mut seeded_rng(7));
        assert_eq!(a, b);
    }
}
