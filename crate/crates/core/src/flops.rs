//! Analytical FLOPs accounting.
//!
//! One multiply-accumulate counts as 2 FLOPs. Under [`Convention::ConvLinear`]
//! only convolution and linear products are counted; [`Convention::AllLayers`]
//! adds biases and every other layer kind at the fixed per-element rates
//! below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, NetworkGraph, NodeId, Role};

/// Batch-norm and layer-norm cost per element.
pub const NORM_PER_ELEM: u64 = 4;
pub const RELU_PER_ELEM: u64 = 1;
/// Average and global pooling cost per input element.
pub const POOL_PER_INPUT: u64 = 1;
pub const SOFTMAX_PER_ELEM: u64 = 5;
/// Elementwise sum: one add per element for each input beyond the first.
pub const ADD_PER_ELEM: u64 = 1;
/// Power normalization: square, accumulate and rescale each element.
pub const POWER_NORM_PER_ELEM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Convolution and linear products only, no bias.
    ConvLinear,
    #[default]
    AllLayers,
}

impl Convention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv-linear" => Ok(Convention::ConvLinear),
            "all-layers" => Ok(Convention::AllLayers),
            other => Err(Error::Config(format!("unknown FLOPs convention `{other}`"))),
        }
    }
}

/// `2 * c_in * c_out * k^2 * h_out * w_out`.
pub fn conv_flops(c_in: usize, c_out: usize, kernel: usize, h_out: usize, w_out: usize) -> Result<u64> {
    if [c_in, c_out, kernel, h_out, w_out].contains(&0) {
        return Err(Error::Config(format!(
            "conv FLOPs arguments must be >= 1, got ({c_in}, {c_out}, {kernel}, {h_out}, {w_out})"
        )));
    }
    Ok(2 * (c_in * c_out * kernel * kernel * h_out * w_out) as u64)
}

/// Effective input channels after a bottleneck of width factor `factor`.
pub fn bottleneck_in_channels(c_in: usize, c_out: usize, factor: usize) -> usize {
    c_in.min(factor * c_out)
}

/// `2 * d_in * d_out`.
pub fn linear_flops(d_in: usize, d_out: usize) -> Result<u64> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::Config(format!("linear FLOPs arguments must be >= 1, got ({d_in}, {d_out})")));
    }
    Ok(2 * (d_in * d_out) as u64)
}

/// Idealized dense-layer cost with the bottleneck rule applied to the input
/// channels: `2 * min(c_in, factor * c_out) * c_out * k^2 * h * w`.
pub fn bottleneck_layer_flops(c_in: usize, c_out: usize, factor: usize, kernel: usize, h_out: usize, w_out: usize) -> Result<u64> {
    conv_flops(bottleneck_in_channels(c_in, c_out, factor), c_out, kernel, h_out, w_out)
}

/// Cost of one node under `convention`.
pub fn layer_flops(graph: &NetworkGraph, id: NodeId, convention: Convention) -> u64 {
    let node = graph.node(id);
    let out: u64 = graph.shape(id).iter().product::<usize>() as u64;
    let input = |k: usize| -> u64 { graph.shape(node.inputs[k]).iter().product::<usize>() as u64 };
    let all = convention == Convention::AllLayers;
    match &node.kind {
        LayerKind::Conv(c) | LayerKind::StridedConv(c) => {
            let s = graph.shape(id);
            let mac = 2 * (c.c_in * c.c_out * c.kernel * c.kernel * s[1] * s[2]) as u64;
            mac + if all && c.bias { out } else { 0 }
        }
        LayerKind::Linear { d_in, d_out } => 2 * (d_in * d_out) as u64 + if all { *d_out as u64 } else { 0 },
        _ if !all => 0,
        LayerKind::BatchNorm { .. } | LayerKind::LayerNorm { .. } => NORM_PER_ELEM * out,
        LayerKind::Relu => RELU_PER_ELEM * out,
        LayerKind::AvgPool { .. } | LayerKind::GlobalPool => POOL_PER_INPUT * input(0),
        LayerKind::Softmax => SOFTMAX_PER_ELEM * out,
        LayerKind::Add => ADD_PER_ELEM * out * (node.inputs.len() as u64 - 1),
        LayerKind::PowerNormalize => POWER_NORM_PER_ELEM * out,
        LayerKind::Input { .. } | LayerKind::Concat | LayerKind::Channel(_) => 0,
    }
}

/// Nodes that define one exit of a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitTaps {
    /// Transmitter-side confidence logits (the static model has none).
    pub confidence: Option<NodeId>,
    /// Power-normalized transmitted signal.
    pub transmitted: NodeId,
    /// Receiver-side class logits.
    pub receiver: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub id: NodeId,
    pub name: String,
    pub scale: Option<usize>,
    pub role: Role,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsProfile {
    pub convention: Convention,
    pub layers: Vec<LayerFlops>,
    /// Cumulative transmitter cost `C_k` per exit.
    pub exits: Vec<u64>,
    /// Receiver-side cost (channel decoder and inference head) per exit.
    pub receiver: Vec<u64>,
    /// `C_k` plus exit k's receiver cost.
    pub end_to_end: Vec<u64>,
    /// Sum over every layer in the graph.
    pub total: u64,
    /// Sum over the feature encoder alone.
    pub encoder_total: u64,
}

impl FlopsProfile {
    pub fn flops_min(&self) -> Option<u64> {
        self.exits.first().copied()
    }

    pub fn flops_max(&self) -> Option<u64> {
        self.exits.last().copied()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.exits.iter().map(|&c| c as f64).collect()
    }

    pub fn scale_total(&self, scale: usize) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.scale == Some(scale))
            .map(|l| l.flops)
            .sum()
    }
}

/// Tallies every layer and the per-exit cumulative costs.
///
/// `C_k` covers every ancestor of exit k's transmitted signal and of the
/// confidence heads of exits `1..=k`: a sample reaching exit k has had all
/// earlier confidence heads evaluated.
pub fn profile_graph(graph: &NetworkGraph, exits: &[ExitTaps], convention: Convention) -> Result<FlopsProfile> {
    if !graph.is_empty() {
        let mut targets: Vec<NodeId> = exits.iter().map(|e| e.receiver).collect();
        targets.extend(exits.iter().map(|e| e.transmitted));
        graph.validate(&targets)?;
    }
    let per_layer: Vec<u64> = (0..graph.len()).map(|id| layer_flops(graph, id, convention)).collect();
    let layers = graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(id, n)| LayerFlops {
            id,
            name: n.name.clone(),
            scale: n.scale,
            role: n.role,
            flops: per_layer[id],
        })
        .collect();

    let mut costs = Vec::with_capacity(exits.len());
    let mut targets = Vec::new();
    for e in exits {
        targets.extend(e.confidence);
        let mut t = targets.clone();
        t.push(e.transmitted);
        let mask = graph.ancestors(&t);
        costs.push(mask.iter().zip(&per_layer).filter(|(m, _)| **m).map(|(_, f)| f).sum::<u64>());
    }
    let receiver: Vec<u64> = (1..=exits.len())
        .map(|k| {
            graph
                .nodes()
                .iter()
                .zip(&per_layer)
                .filter(|(n, _)| matches!(n.role, Role::Channel(j) | Role::ChannelDecoder(j) | Role::Receiver(j) if j == k))
                .map(|(_, f)| f)
                .sum()
        })
        .collect();
    let end_to_end = costs.iter().zip(&receiver).map(|(a, b)| a + b).collect();
    Ok(FlopsProfile {
        convention,
        layers,
        exits: costs,
        receiver,
        end_to_end,
        total: per_layer.iter().sum(),
        encoder_total: graph
            .nodes()
            .iter()
            .zip(&per_layer)
            .filter(|(n, _)| n.role == Role::Encoder)
            .map(|(_, f)| f)
            .sum(),
    })
}
