//! Central finite-difference verification of [`backward`](crate::nn::backward).
//!
//! The scalar objective is a fixed random linear functional of the chosen
//! output nodes. Every forward pass replays the same noise stream, so
//! channel layers behave as frozen draws.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::exec::{backward, forward, Mode};
use crate::nn::graph::{NetworkGraph, NodeId};
use crate::nn::params::{GradientSet, ParameterSet};
use crate::tensor::Tensor;
use crate::{seeded_rng, SeededRng};

pub const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to a ReLU kink trigger resampling.
pub const KINK_TOL: f64 = 1e-6;
pub const MAX_RESAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter tensor.
    pub groups: BTreeMap<String, f64>,
    /// How many times the input was jittered away from a ReLU kink.
    pub resamples: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.values().copied().fold(0.0, f64::max)
    }

    pub fn failing(&self, tolerance: f64) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, &e)| !(e <= tolerance))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failing(tolerance).is_empty()
    }
}

/// The objective `sum_o <c_o, y_o>` plus the frozen noise seed.
#[derive(Debug, Clone)]
pub struct Probe {
    outputs: Vec<(NodeId, Tensor)>,
    noise_seed: u64,
    mode: Mode,
}

impl Probe {
    pub fn new(graph: &NetworkGraph, outputs: &[NodeId], batch: usize, mode: Mode, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let outputs = outputs
            .iter()
            .map(|&o| {
                let mut shape = vec![batch];
                shape.extend_from_slice(graph.shape(o));
                let n: usize = shape.iter().product();
                let c = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                (o, Tensor::new(shape, c).expect("non-empty output shape"))
            })
            .collect();
        Self {
            outputs,
            noise_seed: seed.wrapping_add(0x9e37_79b9),
            mode,
        }
    }

    fn noise(&self) -> SeededRng {
        seeded_rng(self.noise_seed)
    }

    pub fn objective(&self, graph: &NetworkGraph, params: &ParameterSet, input: &Tensor) -> Result<f64> {
        let acts = forward(graph, params, input, self.mode, &mut self.noise())?;
        Ok(self
            .outputs
            .iter()
            .map(|(o, c)| {
                let y = acts.get(*o).expect("forward evaluates every node");
                y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum())
    }

    pub fn analytic(&self, graph: &NetworkGraph, params: &ParameterSet, input: &Tensor) -> Result<GradientSet> {
        let acts = forward(graph, params, input, self.mode, &mut self.noise())?;
        backward(graph, params, &acts, self.outputs.clone())
    }

    /// Central differences for every trainable parameter entry.
    pub fn numeric(&self, graph: &NetworkGraph, params: &ParameterSet, input: &Tensor) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(params);
        let mut work = params.clone();
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            let n = params.get(&name).expect("listed").len();
            for i in 0..n {
                let orig = params.get(&name).expect("listed").data()[i];
                work.get_mut(&name).expect("cloned").data_mut()[i] = orig + FD_STEP;
                let plus = self.objective(graph, &work, input)?;
                work.get_mut(&name).expect("cloned").data_mut()[i] = orig - FD_STEP;
                let minus = self.objective(graph, &work, input)?;
                work.get_mut(&name).expect("cloned").data_mut()[i] = orig;
                grads.get_mut(&name).expect("mirrors params").data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
            }
        }
        Ok(grads)
    }

    fn near_kink(&self, graph: &NetworkGraph, params: &ParameterSet, input: &Tensor) -> Result<bool> {
        let acts = forward(graph, params, input, self.mode, &mut self.noise())?;
        Ok(acts.relu_near_kink(graph, KINK_TOL))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximized per parameter tensor.
pub fn compare(analytic: &GradientSet, numeric: &GradientSet) -> BTreeMap<String, f64> {
    analytic
        .iter()
        .map(|(k, a)| {
            let n = numeric.get(k).expect("same parameter set");
            let err = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
                .fold(0.0, f64::max);
            (k.clone(), err)
        })
        .collect()
}

/// Compares backward against central differences on `input`.
pub fn finite_diff_check(
    graph: &NetworkGraph,
    params: &ParameterSet,
    input: &Tensor,
    outputs: &[NodeId],
    mode: Mode,
    seed: u64,
) -> Result<GradCheckReport> {
    let probe = Probe::new(graph, outputs, input.batch(), mode, seed);
    let mut jitter = seeded_rng(seed.wrapping_add(1));
    let mut x = input.clone();
    let mut resamples = 0;
    while resamples < MAX_RESAMPLES && probe.near_kink(graph, params, &x)? {
        for v in x.data_mut() {
            *v += 1e-3 * jitter.sample::<f64, _>(StandardNormal);
        }
        resamples += 1;
    }
    let analytic = probe.analytic(graph, params, &x)?;
    let numeric = probe.numeric(graph, params, &x)?;
    Ok(GradCheckReport {
        groups: compare(&analytic, &numeric),
        resamples,
    })
}
