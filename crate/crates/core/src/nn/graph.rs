//! Layer DAG with eager per-sample shape inference.
//!
//! Nodes are appended in topological order: a node may only consume nodes
//! that already exist, so every graph built through [`NetworkGraph::add_node`]
//! is acyclic by construction. Shapes exclude the batch dimension.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::ChannelSpec;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            bias: false,
        }
    }

    /// Zero padding on each side; convolutions are "same"-padded.
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding();
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Input { shape: Vec<usize> },
    Conv(ConvSpec),
    StridedConv(ConvSpec),
    Linear { d_in: usize, d_out: usize },
    Relu,
    BatchNorm { channels: usize },
    LayerNorm { dim: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalPool,
    Concat,
    /// Elementwise sum of two or more equally shaped inputs (residual joins).
    Add,
    Softmax,
    PowerNormalize,
    Channel(ChannelSpec),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv(_) => "conv",
            LayerKind::StridedConv(_) => "strided-conv",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm { .. } => "batch-norm",
            LayerKind::LayerNorm { .. } => "layer-norm",
            LayerKind::AvgPool { .. } => "avg-pool",
            LayerKind::GlobalPool => "global-pool",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::Softmax => "softmax",
            LayerKind::PowerNormalize => "power-normalize",
            LayerKind::Channel(_) => "channel",
        }
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            LayerKind::Conv(c) | LayerKind::StridedConv(c) => Some(c),
            _ => None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            LayerKind::Conv(c) | LayerKind::StridedConv(c) => {
                if c.kernel == 0 || c.stride == 0 || c.c_in == 0 || c.c_out == 0 {
                    return Err("conv kernel, stride and channel counts must be >= 1".into());
                }
                if matches!(self, LayerKind::StridedConv(_)) && c.stride < 2 {
                    return Err("strided-conv needs stride >= 2".into());
                }
            }
            LayerKind::Linear { d_in, d_out } => {
                if *d_in == 0 || *d_out == 0 {
                    return Err("linear units must be > 0".into());
                }
            }
            LayerKind::AvgPool { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return Err("pool kernel and stride must be >= 1".into());
                }
            }
            LayerKind::BatchNorm { channels: n } | LayerKind::LayerNorm { dim: n } => {
                if *n == 0 {
                    return Err("normalization width must be > 0".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Which part of the communication pipeline a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "part", content = "exit", rename_all = "kebab-case")]
pub enum Role {
    #[default]
    Encoder,
    ConfidenceHead(usize),
    ChannelEncoder(usize),
    Channel(usize),
    ChannelDecoder(usize),
    Receiver(usize),
}

impl Role {
    pub fn is_transmitter(&self) -> bool {
        matches!(
            self,
            Role::Encoder | Role::ConfidenceHead(_) | Role::ChannelEncoder(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub role: Role,
    /// Resolution scale (1-based) for multi-scale encoders.
    pub scale: Option<usize>,
    /// Layer depth index (1-based) for multi-scale encoders.
    pub layer: Option<usize>,
}

impl Node {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.to_vec(),
            role: Role::default(),
            scale: None,
            layer: None,
        }
    }

    pub fn role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn at(mut self, scale: usize, layer: usize) -> Self {
        self.scale = Some(scale);
        self.layer = Some(layer);
        self
    }
}

/// Trainable parameter and buffer declarations of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub init: ParamInit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    FanInGaussian,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NetworkGraph {
    nodes: Vec<Node>,
    shapes: Vec<Vec<usize>>,
    #[serde(skip)]
    by_name: BTreeMap<String, NodeId>,
}

impl NetworkGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.add_node(Node::new(name, kind, inputs))
    }

    /// Appends a node after validating its attributes and inferring its shape.
    pub fn add_node(&mut self, node: Node) -> Result<NodeId> {
        if self.by_name.contains_key(&node.name) {
            return Err(Error::Graph(format!("duplicate node name `{}`", node.name)));
        }
        if node.name.contains('.') {
            return Err(Error::Graph(format!("node name `{}` may not contain '.'", node.name)));
        }
        node.kind
            .validate()
            .map_err(|d| Error::shape(&node.name, d))?;
        for &i in &node.inputs {
            if i >= self.nodes.len() {
                return Err(Error::Graph(format!(
                    "node `{}` consumes undefined node {i}",
                    node.name
                )));
            }
        }
        let shape = self.infer(&node)?;
        let id = self.nodes.len();
        self.by_name.insert(node.name.clone(), id);
        self.nodes.push(node);
        self.shapes.push(shape);
        Ok(id)
    }

    fn infer(&self, node: &Node) -> Result<Vec<usize>> {
        let err = |d: String| Error::shape(&node.name, d);
        let ins: Vec<&[usize]> = node.inputs.iter().map(|&i| self.shapes[i].as_slice()).collect();
        let arity = |n: usize| -> Result<()> {
            if ins.len() != n {
                Err(err(format!("expects {n} input(s), got {}", ins.len())))
            } else {
                Ok(())
            }
        };
        match &node.kind {
            LayerKind::Input { shape } => {
                arity(0)?;
                if shape.is_empty() || shape.contains(&0) {
                    return Err(err(format!("invalid input shape {shape:?}")));
                }
                Ok(shape.clone())
            }
            LayerKind::Conv(c) | LayerKind::StridedConv(c) => {
                arity(1)?;
                let s = ins[0];
                if s.len() != 3 || s[0] != c.c_in {
                    return Err(err(format!("expects [{}, H, W], got {s:?}", c.c_in)));
                }
                let h = c.out_dim(s[1]).ok_or_else(|| err("kernel larger than input".into()))?;
                let w = c.out_dim(s[2]).ok_or_else(|| err("kernel larger than input".into()))?;
                Ok(vec![c.c_out, h, w])
            }
            LayerKind::Linear { d_in, d_out } => {
                arity(1)?;
                let n: usize = ins[0].iter().product();
                if n != *d_in {
                    return Err(err(format!("expects {d_in} features, got {:?}", ins[0])));
                }
                Ok(vec![*d_out])
            }
            LayerKind::Relu | LayerKind::PowerNormalize | LayerKind::Channel(_) => {
                arity(1)?;
                Ok(ins[0].to_vec())
            }
            LayerKind::Softmax => {
                arity(1)?;
                if ins[0].len() != 1 {
                    return Err(err(format!("expects a vector, got {:?}", ins[0])));
                }
                Ok(ins[0].to_vec())
            }
            LayerKind::BatchNorm { channels } => {
                arity(1)?;
                let s = ins[0];
                if !(s.len() == 1 || s.len() == 3) || s[0] != *channels {
                    return Err(err(format!("expects [{channels}] or [{channels}, H, W], got {s:?}")));
                }
                Ok(s.to_vec())
            }
            LayerKind::LayerNorm { dim } => {
                arity(1)?;
                let n: usize = ins[0].iter().product();
                if n != *dim {
                    return Err(err(format!("expects {dim} features, got {:?}", ins[0])));
                }
                Ok(ins[0].to_vec())
            }
            LayerKind::AvgPool { kernel, stride } => {
                arity(1)?;
                let s = ins[0];
                if s.len() != 3 || s[1] < *kernel || s[2] < *kernel {
                    return Err(err(format!("expects [C, H, W] with H, W >= {kernel}, got {s:?}")));
                }
                Ok(vec![s[0], (s[1] - kernel) / stride + 1, (s[2] - kernel) / stride + 1])
            }
            LayerKind::GlobalPool => {
                arity(1)?;
                let s = ins[0];
                if s.len() != 3 {
                    return Err(err(format!("expects [C, H, W], got {s:?}")));
                }
                Ok(vec![s[0]])
            }
            LayerKind::Concat => {
                if ins.is_empty() {
                    return Err(err("concat needs at least one input".into()));
                }
                let first = ins[0];
                let mut channels = 0;
                for s in &ins {
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(err(format!("cannot concatenate {first:?} with {s:?}")));
                    }
                    channels += s[0];
                }
                let mut out = first.to_vec();
                out[0] = channels;
                Ok(out)
            }
            LayerKind::Add => {
                if ins.len() < 2 {
                    return Err(err("add needs at least two inputs".into()));
                }
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(err(format!("add inputs differ in shape: {ins:?}")));
                }
                Ok(ins[0].to_vec())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Replaces the model of every channel node.
    pub fn set_channel(&mut self, spec: ChannelSpec) {
        for n in &mut self.nodes {
            if let LayerKind::Channel(s) = &mut n.kind {
                *s = spec;
            }
        }
    }

    /// Per-sample output shape of a node.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    /// The unique input node.
    pub fn input(&self) -> Result<NodeId> {
        let mut it = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, LayerKind::Input { .. }));
        match (it.next(), it.next()) {
            (Some((id, _)), None) => Ok(id),
            _ => Err(Error::Graph("graph must have exactly one input node".into())),
        }
    }

    /// Membership mask of `targets` and all their ancestors.
    pub fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        for &t in targets {
            mark[t] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if mark[id] {
                for &i in &self.nodes[id].inputs {
                    mark[i] = true;
                }
            }
        }
        mark
    }

    /// Checks acyclicity, edge validity and that each target is reachable from the input.
    pub fn validate(&self, targets: &[NodeId]) -> Result<()> {
        for (id, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&i| i >= id) {
                return Err(Error::Graph(format!("node `{}` breaks topological order", n.name)));
            }
        }
        let input = self.input()?;
        let mut reach = vec![false; self.nodes.len()];
        reach[input] = true;
        for (id, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&i| reach[i]) {
                reach[id] = true;
            }
        }
        for &t in targets {
            if !reach[t] {
                return Err(Error::Graph(format!(
                    "node `{}` is not reachable from the input",
                    self.nodes[t].name
                )));
            }
        }
        Ok(())
    }

    /// Parameter declarations, split into trainable parameters and buffers.
    pub fn param_decls(&self) -> (Vec<ParamDecl>, Vec<ParamDecl>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let decl = |node: &str, p: &str, shape: Vec<usize>, fan_in: usize, init| ParamDecl {
            name: format!("{node}.{p}"),
            shape,
            fan_in,
            init,
        };
        for n in &self.nodes {
            match &n.kind {
                LayerKind::Conv(c) | LayerKind::StridedConv(c) => {
                    let fan_in = c.c_in * c.kernel * c.kernel;
                    params.push(decl(
                        &n.name,
                        "weight",
                        vec![c.c_out, c.c_in, c.kernel, c.kernel],
                        fan_in,
                        ParamInit::FanInGaussian,
                    ));
                    if c.bias {
                        params.push(decl(&n.name, "bias", vec![c.c_out], fan_in, ParamInit::Zeros));
                    }
                }
                LayerKind::Linear { d_in, d_out } => {
                    params.push(decl(&n.name, "weight", vec![*d_out, *d_in], *d_in, ParamInit::FanInGaussian));
                    params.push(decl(&n.name, "bias", vec![*d_out], *d_in, ParamInit::Zeros));
                }
                LayerKind::BatchNorm { channels } => {
                    params.push(decl(&n.name, "gamma", vec![*channels], 1, ParamInit::Ones));
                    params.push(decl(&n.name, "beta", vec![*channels], 1, ParamInit::Zeros));
                    buffers.push(decl(&n.name, "running_mean", vec![*channels], 1, ParamInit::Zeros));
                    buffers.push(decl(&n.name, "running_var", vec![*channels], 1, ParamInit::Ones));
                }
                LayerKind::LayerNorm { dim } => {
                    params.push(decl(&n.name, "gamma", vec![*dim], 1, ParamInit::Ones));
                    params.push(decl(&n.name, "beta", vec![*dim], 1, ParamInit::Zeros));
                }
                _ => {}
            }
        }
        (params, buffers)
    }
}

impl fmt::Display for NetworkGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, n) in self.nodes.iter().enumerate() {
            writeln!(
                f,
                "{id:>4} {:<24} {:<16} {:?} <- {:?}",
                n.name,
                n.kind.name(),
                self.shapes[id],
                n.inputs
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(g: &mut NetworkGraph, shape: &[usize]) -> NodeId {
        g.add("in", LayerKind::Input { shape: shape.to_vec() }, &[]).unwrap()
    }

    #[test]
    fn conv_shape_inference() {
        let mut g = NetworkGraph::new();
        let x = input(&mut g, &[3, 32, 32]);
        let c = g.add("c", LayerKind::Conv(ConvSpec::new(3, 8, 3, 1)), &[x]).unwrap();
        assert_eq!(g.shape(c), &[8, 32, 32]);
        let s = g
            .add("s", LayerKind::StridedConv(ConvSpec::new(8, 16, 3, 2)), &[c])
            .unwrap();
        assert_eq!(g.shape(s), &[16, 16, 16]);
        let p = g.add("p", LayerKind::GlobalPool, &[s]).unwrap();
        assert_eq!(g.shape(p), &[16]);
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = NetworkGraph::new();
        let x = input(&mut g, &[3, 8, 8]);
        let e = g
            .add("bad_conv", LayerKind::Conv(ConvSpec::new(4, 8, 3, 1)), &[x])
            .unwrap_err();
        assert!(e.to_string().contains("bad_conv"), "{e}");
    }

    #[test]
    fn layer_spec_invariants() {
        let mut g = NetworkGraph::new();
        let x = input(&mut g, &[3, 8, 8]);
        assert!(g.add("a", LayerKind::StridedConv(ConvSpec::new(3, 8, 3, 1)), &[x]).is_err());
        assert!(g.add("b", LayerKind::Conv(ConvSpec::new(3, 8, 0, 1)), &[x]).is_err());
        assert!(g.add("c", LayerKind::Linear { d_in: 192, d_out: 0 }, &[x]).is_err());
        assert!(g.add("d", LayerKind::Linear { d_in: 192, d_out: 4 }, &[x]).is_ok());
    }

    #[test]
    fn concat_sums_channels() {
        let mut g = NetworkGraph::new();
        let x = input(&mut g, &[3, 8, 8]);
        let a = g.add("a", LayerKind::Conv(ConvSpec::new(3, 4, 3, 1)), &[x]).unwrap();
        let c = g.add("c", LayerKind::Concat, &[x, a]).unwrap();
        assert_eq!(g.shape(c), &[7, 8, 8]);
        let s = g.add("s", LayerKind::StridedConv(ConvSpec::new(3, 4, 3, 2)), &[x]).unwrap();
        assert!(g.add("bad", LayerKind::Concat, &[x, s]).is_err());
    }

    #[test]
    fn ancestors_and_reachability() {
        let mut g = NetworkGraph::new();
        let x = input(&mut g, &[4]);
        let a = g.add("a", LayerKind::Linear { d_in: 4, d_out: 2 }, &[x]).unwrap();
        let b = g.add("b", LayerKind::Linear { d_in: 4, d_out: 2 }, &[x]).unwrap();
        let m = g.ancestors(&[a]);
        assert!(m[x] && m[a] && !m[b]);
        g.validate(&[a, b]).unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut g = NetworkGraph::new();
        let x = input(&mut g, &[4]);
        g.add("r", LayerKind::Relu, &[x]).unwrap();
        assert!(g.add("r", LayerKind::Relu, &[x]).is_err());
    }
}
