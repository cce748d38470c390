//! Forward and reverse-mode evaluation of a [`NetworkGraph`].
//!
//! Activations are batch-first: a node with per-sample shape `[C, H, W]`
//! holds a `[N, C, H, W]` tensor. The [`Executor`] evaluates lazily and
//! memoizes, so asking for a later node reuses everything already computed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::link;
use crate::nn::graph::{ConvSpec, LayerKind, NetworkGraph, NodeId};
use crate::nn::params::{GradientSet, ParameterSet};
use crate::tensor::{softmax_row, Tensor};
use crate::SeededRng;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-node state saved by the forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
enum Aux {
    #[default]
    None,
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gains(Vec<f64>),
    Scales(Vec<f64>),
}

/// Results of a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    mode: Mode,
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    fed: Vec<bool>,
    stat_updates: BTreeMap<String, Tensor>,
}

impl Activations {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(Option::as_ref)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch statistics seen by batch-norm layers in train mode, keyed by the
    /// running buffer they feed (`{layer}.running_mean`, `{layer}.running_var`).
    /// Variances are unbiased.
    pub fn batch_stats(&self) -> &BTreeMap<String, Tensor> {
        &self.stat_updates
    }

    /// Folds the batch statistics into the running buffers of `params` with
    /// momentum [`BN_MOMENTUM`].
    pub fn apply_stat_updates(&self, params: &mut ParameterSet) {
        for (k, b) in &self.stat_updates {
            if let Some(slot) = params.get_mut(k) {
                for (r, b) in slot.data_mut().iter_mut().zip(b.data()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Pre-activation values feeding ReLU nodes that lie within `tol` of the kink.
    pub fn relu_near_kink(&self, graph: &NetworkGraph, tol: f64) -> bool {
        graph.nodes().iter().enumerate().any(|(id, n)| {
            matches!(n.kind, LayerKind::Relu)
                && self.get(id).is_some()
                && self
                    .get(n.inputs[0])
                    .is_some_and(|x| x.data().iter().any(|v| v.abs() < tol))
        })
    }
}

/// Lazy, memoizing forward evaluator.
pub struct Executor<'a> {
    graph: &'a NetworkGraph,
    params: &'a ParameterSet,
    rng: &'a mut SeededRng,
    acts: Activations,
    evaluations: usize,
    channel_seed: Option<u64>,
}

impl<'a> Executor<'a> {
    pub fn new(graph: &'a NetworkGraph, params: &'a ParameterSet, mode: Mode, rng: &'a mut SeededRng) -> Self {
        let n = graph.len();
        Self {
            graph,
            params,
            rng,
            acts: Activations {
                mode,
                values: vec![None; n],
                aux: vec![Aux::None; n],
                fed: vec![false; n],
                stat_updates: BTreeMap::new(),
            },
            evaluations: 0,
            channel_seed: None,
        }
    }

    /// Makes every channel node draw its noise from a fresh stream seeded with
    /// `seed`, so equally shaped channel inputs see identical realizations.
    pub fn share_channel_noise(&mut self, seed: u64) {
        self.channel_seed = Some(seed);
    }

    /// Provides the value of `node` directly; its ancestors are never evaluated.
    pub fn feed(&mut self, node: NodeId, value: Tensor) -> Result<()> {
        let expected = self.graph.shape(node);
        if value.rank() != expected.len() + 1 || &value.shape()[1..] != expected {
            return Err(Error::shape(
                &self.graph.node(node).name,
                format!("expected [N, {expected:?}], got {:?}", value.shape()),
            ));
        }
        value.check_finite(&self.graph.node(node).name)?;
        self.acts.values[node] = Some(value);
        self.acts.fed[node] = true;
        Ok(())
    }

    pub fn feed_input(&mut self, value: Tensor) -> Result<()> {
        let input = self.graph.input()?;
        self.feed(input, value)
    }

    /// Evaluates `node` and whatever ancestors are still missing.
    pub fn eval(&mut self, node: NodeId) -> Result<&Tensor> {
        if self.acts.values[node].is_none() {
            let mut need = vec![false; self.graph.len()];
            need[node] = true;
            for id in (0..=node).rev() {
                if need[id] && self.acts.values[id].is_none() {
                    for &i in &self.graph.node(id).inputs {
                        need[i] = true;
                    }
                }
            }
            for id in 0..=node {
                if need[id] && self.acts.values[id].is_none() {
                    self.compute(id)?;
                }
            }
        }
        Ok(self.acts.values[node].as_ref().expect("just computed"))
    }

    pub fn eval_all(&mut self, nodes: &[NodeId]) -> Result<()> {
        for &n in nodes {
            self.eval(n)?;
        }
        Ok(())
    }

    /// Number of node computations performed so far (feeds excluded).
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn is_computed(&self, node: NodeId) -> bool {
        self.acts.values[node].is_some()
    }

    pub fn activations(&self) -> &Activations {
        &self.acts
    }

    pub fn into_activations(self) -> Activations {
        self.acts
    }

    fn compute(&mut self, id: NodeId) -> Result<()> {
        let node = self.graph.node(id);
        if let LayerKind::Input { .. } = node.kind {
            return Err(Error::MissingActivation(node.name.clone()));
        }
        let inputs: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|&i| self.acts.values[i].as_ref().expect("inputs evaluated first"))
            .collect();
        let batch = inputs[0].batch();
        if inputs.iter().any(|t| t.batch() != batch) {
            return Err(Error::shape(&node.name, "inputs disagree on batch size"));
        }
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(self.graph.shape(id));
        let name = node.name.as_str();
        let p = |suffix: &str| self.params.param(&format!("{name}.{suffix}"));
        let mode = self.acts.mode;
        let mut aux = Aux::None;

        let out = match &node.kind {
            LayerKind::Input { .. } => unreachable!(),
            LayerKind::Conv(c) | LayerKind::StridedConv(c) => {
                let in_shape = self.graph.shape(node.inputs[0]);
                let bias = if c.bias { Some(p("bias")?) } else { None };
                conv_forward(c, in_shape, inputs[0], p("weight")?, bias, &out_shape)
            }
            LayerKind::Linear { d_in, d_out } => linear_forward(*d_in, *d_out, inputs[0], p("weight")?, p("bias")?),
            LayerKind::Relu => {
                let mut t = inputs[0].clone();
                for v in t.data_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                t
            }
            LayerKind::BatchNorm { channels } => {
                let (out, a, stats) = batch_norm_forward(
                    *channels,
                    inputs[0],
                    p("gamma")?,
                    p("beta")?,
                    p("running_mean")?,
                    p("running_var")?,
                    mode,
                );
                if let Some((m, v)) = stats {
                    self.acts.stat_updates.insert(format!("{name}.running_mean"), m);
                    self.acts.stat_updates.insert(format!("{name}.running_var"), v);
                }
                aux = a;
                out
            }
            LayerKind::LayerNorm { .. } => {
                let (out, a) = layer_norm_forward(inputs[0], p("gamma")?, p("beta")?);
                aux = a;
                out
            }
            LayerKind::AvgPool { kernel, stride } => {
                avg_pool_forward(self.graph.shape(node.inputs[0]), *kernel, *stride, inputs[0], &out_shape)
            }
            LayerKind::GlobalPool => {
                let x = inputs[0];
                let hw = x.sample_len() / out_shape[1];
                let data = x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
                Tensor::new(out_shape.clone(), data)?
            }
            LayerKind::Concat => {
                let mut data = Vec::with_capacity(out_shape.iter().product());
                for i in 0..batch {
                    for t in &inputs {
                        data.extend_from_slice(t.sample(i));
                    }
                }
                Tensor::new(out_shape.clone(), data)?
            }
            LayerKind::Add => {
                let mut t = inputs[0].clone();
                for other in &inputs[1..] {
                    t.add_assign(other);
                }
                t
            }
            LayerKind::Softmax => {
                let x = inputs[0];
                let m = x.sample_len();
                let mut t = Tensor::zeros(x.shape());
                for (src, dst) in x.data().chunks(m).zip(t.data_mut().chunks_mut(m)) {
                    softmax_row(src, dst);
                }
                t
            }
            LayerKind::PowerNormalize => {
                let scales = link::power_scales(inputs[0])?;
                let m = inputs[0].sample_len();
                let mut t = inputs[0].clone();
                for (row, s) in t.data_mut().chunks_mut(m).zip(&scales) {
                    for v in row {
                        *v *= s;
                    }
                }
                aux = Aux::Scales(scales);
                t
            }
            LayerKind::Channel(spec) => {
                let (y, gains) = match self.channel_seed {
                    Some(seed) => link::transmit_with_gains(inputs[0], spec, &mut crate::seeded_rng(seed)),
                    None => link::transmit_with_gains(inputs[0], spec, self.rng),
                };
                aux = Aux::Gains(gains);
                y
            }
        };
        debug_assert_eq!(out.shape(), out_shape.as_slice(), "node {name}");
        self.acts.values[id] = Some(out);
        self.acts.aux[id] = aux;
        self.evaluations += 1;
        Ok(())
    }
}

/// Evaluates every node of `graph` on `input`.
pub fn forward(
    graph: &NetworkGraph,
    params: &ParameterSet,
    input: &Tensor,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Activations> {
    run_all(Executor::new(graph, params, mode, rng), input)
}

/// [`forward`] with one noise realization shared by all channel nodes.
pub fn forward_shared_channel(
    graph: &NetworkGraph,
    params: &ParameterSet,
    input: &Tensor,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Activations> {
    use rand::Rng;
    let seed = rng.random::<u64>();
    let mut ex = Executor::new(graph, params, mode, rng);
    ex.share_channel_noise(seed);
    run_all(ex, input)
}

fn run_all(mut ex: Executor<'_>, input: &Tensor) -> Result<Activations> {
    ex.feed_input(input.clone())?;
    for id in 0..ex.graph.len() {
        ex.eval(id)?;
    }
    Ok(ex.into_activations())
}

/// Reverse-mode pass. `seeds` are loss gradients with respect to node outputs;
/// returns gradients for every trainable parameter.
pub fn backward(
    graph: &NetworkGraph,
    params: &ParameterSet,
    acts: &Activations,
    seeds: Vec<(NodeId, Tensor)>,
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_like(params);
    let mut node_grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    for (id, g) in seeds {
        let Some(v) = acts.get(id) else {
            return Err(Error::MissingActivation(graph.node(id).name.clone()));
        };
        if v.shape() != g.shape() {
            return Err(Error::shape(
                &graph.node(id).name,
                format!("seed gradient {:?} does not match activation {:?}", g.shape(), v.shape()),
            ));
        }
        accumulate(&mut node_grads[id], g);
    }

    for id in (0..graph.len()).rev() {
        let Some(dy) = node_grads[id].take() else { continue };
        let node = graph.node(id);
        if acts.fed[id] || matches!(node.kind, LayerKind::Input { .. }) {
            continue;
        }
        let x = |k: usize| -> Result<&Tensor> {
            acts.get(node.inputs[k])
                .ok_or_else(|| Error::MissingActivation(graph.node(node.inputs[k]).name.clone()))
        };
        let y = acts
            .get(id)
            .ok_or_else(|| Error::MissingActivation(node.name.clone()))?;
        let name = node.name.as_str();
        let pname = |s: &str| format!("{name}.{s}");

        match &node.kind {
            LayerKind::Input { .. } => unreachable!(),
            LayerKind::Conv(c) | LayerKind::StridedConv(c) => {
                let in_shape = graph.shape(node.inputs[0]);
                let w = params.param(&pname("weight"))?;
                let (dx, dw, db) = conv_backward(c, in_shape, graph.shape(id), x(0)?, w, &dy);
                grads.slot(&pname("weight"))?.add_assign(&dw);
                if c.bias {
                    grads.slot(&pname("bias"))?.add_assign(&db);
                }
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::Linear { d_in, d_out } => {
                let w = params.param(&pname("weight"))?;
                let (dx, dw, db) = linear_backward(*d_in, *d_out, x(0)?, w, &dy);
                grads.slot(&pname("weight"))?.add_assign(&dw);
                grads.slot(&pname("bias"))?.add_assign(&db);
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::Relu => {
                let mut dx = dy;
                for (g, v) in dx.data_mut().iter_mut().zip(x(0)?.data()) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::BatchNorm { channels } => {
                let Aux::Norm { xhat, inv_std } = &acts.aux[id] else {
                    return Err(Error::MissingActivation(name.to_string()));
                };
                let gamma = params.param(&pname("gamma"))?;
                let (dx, dgamma, dbeta) = batch_norm_backward(*channels, xhat, inv_std, gamma, &dy, acts.mode);
                grads.slot(&pname("gamma"))?.add_assign(&dgamma);
                grads.slot(&pname("beta"))?.add_assign(&dbeta);
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::LayerNorm { .. } => {
                let Aux::Norm { xhat, inv_std } = &acts.aux[id] else {
                    return Err(Error::MissingActivation(name.to_string()));
                };
                let gamma = params.param(&pname("gamma"))?;
                let (dx, dgamma, dbeta) = layer_norm_backward(xhat, inv_std, gamma, &dy);
                grads.slot(&pname("gamma"))?.add_assign(&dgamma);
                grads.slot(&pname("beta"))?.add_assign(&dbeta);
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::AvgPool { kernel, stride } => {
                let in_shape = graph.shape(node.inputs[0]);
                let dx = avg_pool_backward(in_shape, graph.shape(id), *kernel, *stride, &dy, x(0)?.shape());
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::GlobalPool => {
                let xs = x(0)?;
                let hw = xs.sample_len() / dy.sample_len();
                let mut dx = Tensor::zeros(xs.shape());
                for (chunk, g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
                    chunk.fill(g / hw as f64);
                }
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::Concat => {
                let batch = dy.batch();
                let mut offset = 0;
                for (k, &inp) in node.inputs.iter().enumerate() {
                    let xs = x(k)?;
                    let n = xs.sample_len();
                    let mut dx = Tensor::zeros(xs.shape());
                    let total = dy.sample_len();
                    for i in 0..batch {
                        let src = &dy.data()[i * total + offset..i * total + offset + n];
                        dx.data_mut()[i * n..(i + 1) * n].copy_from_slice(src);
                    }
                    offset += n;
                    accumulate(&mut node_grads[inp], dx);
                }
            }
            LayerKind::Add => {
                for &inp in &node.inputs {
                    accumulate(&mut node_grads[inp], dy.clone());
                }
            }
            LayerKind::Softmax => {
                let m = y.sample_len();
                let mut dx = Tensor::zeros(y.shape());
                for ((yr, gr), dr) in y.data().chunks(m).zip(dy.data().chunks(m)).zip(dx.data_mut().chunks_mut(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::PowerNormalize => {
                let Aux::Scales(scales) = &acts.aux[id] else {
                    return Err(Error::MissingActivation(name.to_string()));
                };
                let xs = x(0)?;
                let m = xs.sample_len();
                let mut dx = Tensor::zeros(xs.shape());
                for (((xr, gr), dr), s) in xs
                    .data()
                    .chunks(m)
                    .zip(dy.data().chunks(m))
                    .zip(dx.data_mut().chunks_mut(m))
                    .zip(scales)
                {
                    let ss: f64 = xr.iter().map(|v| v * v).sum();
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, xv), gv) in dr.iter_mut().zip(xr).zip(gr) {
                        *d = s * (gv - xv * dot / ss);
                    }
                }
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
            LayerKind::Channel(_) => {
                let Aux::Gains(gains) = &acts.aux[id] else {
                    return Err(Error::MissingActivation(name.to_string()));
                };
                let m = dy.sample_len();
                let mut dx = dy;
                for (row, h) in dx.data_mut().chunks_mut(m).zip(gains) {
                    for v in row {
                        *v *= h;
                    }
                }
                accumulate(&mut node_grads[node.inputs[0]], dx);
            }
        }
    }
    Ok(grads)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, with optional transposed storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_pointwise(c: &ConvSpec) -> bool {
    c.kernel == 1 && c.stride == 1
}

fn im2col(c: &ConvSpec, in_shape: &[usize], h_out: usize, w_out: usize, x: &[f64], cols: &mut [f64]) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let k = c.kernel;
    let pad = c.padding() as isize;
    let p = h_out * w_out;
    for ch in 0..c.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * p;
                for oh in 0..h_out {
                    let ih = (oh * c.stride + ki) as isize - pad;
                    let dst = &mut cols[row + oh * w_out..row + (oh + 1) * w_out];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * h + ih as usize) * w..(ch * h + ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * c.stride + kj) as isize - pad;
                        *d = if iw < 0 || iw >= w as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(c: &ConvSpec, in_shape: &[usize], h_out: usize, w_out: usize, cols: &[f64], dx: &mut [f64]) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let k = c.kernel;
    let pad = c.padding() as isize;
    let p = h_out * w_out;
    for ch in 0..c.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * p;
                for oh in 0..h_out {
                    let ih = (oh * c.stride + ki) as isize - pad;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = (ch * h + ih as usize) * w;
                    for ow in 0..w_out {
                        let iw = (ow * c.stride + kj) as isize - pad;
                        if iw >= 0 && iw < w as isize {
                            dx[base + iw as usize] += cols[row + oh * w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    c: &ConvSpec,
    in_shape: &[usize],
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    out_shape: &[usize],
) -> Tensor {
    let (h_out, w_out) = (out_shape[2], out_shape[3]);
    let p = h_out * w_out;
    let kk = c.c_in * c.kernel * c.kernel;
    let mut out = Tensor::zeros(out_shape);
    let out_len = c.c_out * p;
    let mut cols = if is_pointwise(c) { Vec::new() } else { vec![0.0; kk * p] };
    for i in 0..x.batch() {
        let xi = x.sample(i);
        let dst = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
        if is_pointwise(c) {
            gemm(c.c_out, kk, p, weight.data(), false, xi, false, dst, 0.0);
        } else {
            im2col(c, in_shape, h_out, w_out, xi, &mut cols);
            gemm(c.c_out, kk, p, weight.data(), false, &cols, false, dst, 0.0);
        }
        if let Some(b) = bias {
            for (row, bv) in dst.chunks_mut(p).zip(b.data()) {
                for v in row {
                    *v += bv;
                }
            }
        }
    }
    out
}

fn conv_backward(
    c: &ConvSpec,
    in_shape: &[usize],
    out_shape: &[usize],
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let p = h_out * w_out;
    let kk = c.c_in * c.kernel * c.kernel;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[c.c_out]);
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    let in_len = x.sample_len();
    for i in 0..x.batch() {
        let xi = x.sample(i);
        let gi = dy.sample(i);
        for (row, d) in gi.chunks(p).zip(db.data_mut()) {
            *d += row.iter().sum::<f64>();
        }
        let dxi = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
        if is_pointwise(c) {
            gemm(c.c_out, p, kk, gi, false, xi, true, dw.data_mut(), 1.0);
            gemm(kk, c.c_out, p, weight.data(), true, gi, false, dxi, 1.0);
        } else {
            im2col(c, in_shape, h_out, w_out, xi, &mut cols);
            gemm(c.c_out, p, kk, gi, false, &cols, true, dw.data_mut(), 1.0);
            gemm(kk, c.c_out, p, weight.data(), true, gi, false, &mut dcols, 0.0);
            col2im(c, in_shape, h_out, w_out, &dcols, dxi);
        }
    }
    (dx, dw, db)
}

fn linear_forward(d_in: usize, d_out: usize, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros(&[n, d_out]);
    for row in out.data_mut().chunks_mut(d_out) {
        row.copy_from_slice(b.data());
    }
    gemm(n, d_in, d_out, x.data(), false, w.data(), true, out.data_mut(), 1.0);
    out
}

fn linear_backward(d_in: usize, d_out: usize, x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.batch();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(&[d_out, d_in]);
    let mut db = Tensor::zeros(&[d_out]);
    gemm(d_out, n, d_in, dy.data(), true, x.data(), false, dw.data_mut(), 0.0);
    gemm(n, d_out, d_in, dy.data(), false, w.data(), false, dx.data_mut(), 0.0);
    for row in dy.data().chunks(d_out) {
        for (d, g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

type BnStats = Option<(Tensor, Tensor)>;

fn batch_norm_forward(
    channels: usize,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
) -> (Tensor, Aux, BnStats) {
    let n = x.batch();
    let hw = x.sample_len() / channels;
    let count = (n * hw) as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for i in 0..n {
                for (c, chunk) in x.sample(i).chunks(hw).enumerate() {
                    mean[c] += chunk.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for (c, chunk) in x.sample(i).chunks(hw).enumerate() {
                    var[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (mean, var)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.len()];
    let sl = x.sample_len();
    for i in 0..n {
        for c in 0..channels {
            let base = i * sl + c * hw;
            for j in base..base + hw {
                let xh = (x.data()[j] - mean[c]) * inv_std[c];
                xhat[j] = xh;
                out.data_mut()[j] = gamma.data()[c] * xh + beta.data()[c];
            }
        }
    }
    let stats = (mode == Mode::Train).then(|| {
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let v: Vec<f64> = var.iter().map(|b| b * unbias).collect();
        (Tensor::from_vec(mean.clone()), Tensor::from_vec(v))
    });
    (out, Aux::Norm { xhat, inv_std }, stats)
}

fn batch_norm_backward(
    channels: usize,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    dy: &Tensor,
    mode: Mode,
) -> (Tensor, Tensor, Tensor) {
    let n = dy.batch();
    let sl = dy.sample_len();
    let hw = sl / channels;
    let count = (n * hw) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for i in 0..n {
        for c in 0..channels {
            let base = i * sl + c * hw;
            for j in base..base + hw {
                dgamma[c] += dy.data()[j] * xhat[j];
                dbeta[c] += dy.data()[j];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        for c in 0..channels {
            let base = i * sl + c * hw;
            let g = gamma.data()[c] * inv_std[c];
            for j in base..base + hw {
                dx.data_mut()[j] = match mode {
                    Mode::Train => g * (dy.data()[j] - dbeta[c] / count - xhat[j] * dgamma[c] / count),
                    Mode::Eval => g * dy.data()[j],
                };
            }
        }
    }
    (dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta))
}

fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Aux) {
    let d = x.sample_len();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.batch());
    for i in 0..x.batch() {
        let row = x.sample(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[i * d + j] = xh;
            out.data_mut()[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    (out, Aux::Norm { xhat, inv_std })
}

fn layer_norm_backward(xhat: &[f64], inv_std: &[f64], gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = dy.sample_len();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = Tensor::zeros(dy.shape());
    for (i, is) in inv_std.iter().enumerate() {
        let g = dy.sample(i);
        let xh = &xhat[i * d..(i + 1) * d];
        let mut sum = 0.0;
        let mut dot = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            let dxh = g[j] * gamma.data()[j];
            sum += dxh;
            dot += dxh * xh[j];
        }
        for j in 0..d {
            let dxh = g[j] * gamma.data()[j];
            dx.data_mut()[i * d + j] = is * (dxh - sum / d as f64 - xh[j] * dot / d as f64);
        }
    }
    (dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta))
}

fn avg_pool_forward(in_shape: &[usize], k: usize, s: usize, x: &Tensor, out_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(out_shape);
    let norm = 1.0 / (k * k) as f64;
    let od = out.data_mut();
    for i in 0..x.batch() {
        let xi = x.sample(i);
        for ch in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += xi[(ch * h + oh * s + ki) * w + ow * s + kj];
                        }
                    }
                    od[((i * c + ch) * ho + oh) * wo + ow] = acc * norm;
                }
            }
        }
    }
    out
}

fn avg_pool_backward(in_shape: &[usize], out_shape: &[usize], k: usize, s: usize, dy: &Tensor, x_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let mut dx = Tensor::zeros(x_shape);
    let norm = 1.0 / (k * k) as f64;
    let n = dy.batch();
    let dd = dx.data_mut();
    for i in 0..n {
        for ch in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dy.data()[((i * c + ch) * ho + oh) * wo + ow] * norm;
                    for ki in 0..k {
                        for kj in 0..k {
                            dd[((i * c + ch) * h + oh * s + ki) * w + ow * s + kj] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}
