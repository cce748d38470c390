//! Static pipeline: residual feature encoder with a single exit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::ChannelSpec;
use crate::nn::{ConvSpec, LayerKind, NetworkGraph, Node, NodeId, ParameterSet};
use crate::pipeline::{attach_exit, ModelKind, TocModel};
use crate::SeededRng;

/// Encoder family: the small desk variant or a `6n+2` residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Depth {
    Tiny8,
    ResNet(usize),
}

impl Depth {
    /// Residual blocks per stage and stage widths.
    fn layout(&self) -> (usize, [usize; 3]) {
        match self {
            Depth::Tiny8 => (1, [8, 16, 32]),
            Depth::ResNet(d) => ((d - 2) / 6, [16, 32, 64]),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.layout().1[2]
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "tiny-8" || s == "tiny8" {
            return Ok(Depth::Tiny8);
        }
        let digits = s.strip_prefix("resnet").unwrap_or(&s);
        let d: usize = digits
            .parse()
            .map_err(|_| Error::Config(format!("unknown static depth `{s}`")))?;
        if d < 8 || (d - 2) % 6 != 0 {
            return Err(Error::Config(format!("depth {d} does not fit the 6n+2 layout")));
        }
        Ok(Depth::ResNet(d))
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::Tiny8 => write!(f, "tiny-8"),
            Depth::ResNet(d) => write!(f, "resnet{d}"),
        }
    }
}

impl TryFrom<String> for Depth {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Depth> for String {
    fn from(d: Depth) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticConfig {
    pub depth: Depth,
    pub num_classes: usize,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub channel: ChannelSpec,
}

struct Builder<'g> {
    g: &'g mut NetworkGraph,
}

impl Builder<'_> {
    fn conv_bn(&mut self, name: &str, x: NodeId, c_out: usize, k: usize, stride: usize, relu: bool) -> Result<NodeId> {
        let c_in = self.g.shape(x)[0];
        let spec = ConvSpec::new(c_in, c_out, k, stride);
        let kind = if stride > 1 { LayerKind::StridedConv(spec) } else { LayerKind::Conv(spec) };
        let c = self.g.add(format!("{name}_conv"), kind, &[x])?;
        let b = self.g.add(format!("{name}_bn"), LayerKind::BatchNorm { channels: c_out }, &[c])?;
        if relu {
            self.g.add(format!("{name}_relu"), LayerKind::Relu, &[b])
        } else {
            Ok(b)
        }
    }

    /// Basic residual block; a strided 1x1 projection matches shapes when needed.
    fn block(&mut self, name: &str, x: NodeId, c_out: usize, stride: usize) -> Result<NodeId> {
        let a = self.conv_bn(&format!("{name}a"), x, c_out, 3, stride, true)?;
        let b = self.conv_bn(&format!("{name}b"), a, c_out, 3, 1, false)?;
        let shortcut = if stride != 1 || self.g.shape(x)[0] != c_out {
            let c_in = self.g.shape(x)[0];
            let spec = ConvSpec::new(c_in, c_out, 1, stride);
            let kind = if stride > 1 { LayerKind::StridedConv(spec) } else { LayerKind::Conv(spec) };
            self.g.add(format!("{name}_proj"), kind, &[x])?
        } else {
            x
        };
        let sum = self.g.add(format!("{name}_add"), LayerKind::Add, &[b, shortcut])?;
        self.g.add(format!("{name}_out"), LayerKind::Relu, &[sum])
    }
}

/// Builds the static pipeline and initializes its parameters.
pub fn build_static(cfg: &StaticConfig, rng: &mut SeededRng) -> Result<TocModel> {
    if cfg.num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.num_classes)));
    }
    if cfg.input_shape.len() != 3 {
        return Err(Error::Config(format!("input shape must be [C, H, W], got {:?}", cfg.input_shape)));
    }
    let (blocks, widths) = cfg.depth.layout();
    let mut graph = NetworkGraph::new();
    let x = graph.add(
        "image",
        LayerKind::Input {
            shape: cfg.input_shape.clone(),
        },
        &[],
    )?;
    let mut b = Builder { g: &mut graph };
    let mut h = b.conv_bn("stem", x, widths[0], 3, 1, true)?;
    for (s, &w) in widths.iter().enumerate() {
        for i in 0..blocks {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            h = b.block(&format!("s{}b{}", s + 1, i + 1), h, w, stride)?;
        }
    }
    let feature = graph.add_node(Node::new("pool", LayerKind::GlobalPool, &[h]))?;
    let exit = attach_exit(&mut graph, feature, None, cfg.channel, 1, cfg.num_classes)?;
    graph.validate(&[exit.probs])?;
    let params = ParameterSet::init(&graph, rng);
    Ok(TocModel {
        kind: ModelKind::Static,
        name: format!("static-{}", cfg.depth),
        graph,
        exits: vec![exit],
        params,
        num_classes: cfg.num_classes,
        exit_blocks: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{CODEC_HIDDEN, TX_DIM};
    use crate::seeded_rng;

    fn cfg(depth: &str, shape: &[usize], m: usize) -> StaticConfig {
        StaticConfig {
            depth: depth.parse().unwrap(),
            num_classes: m,
            input_shape: shape.to_vec(),
            channel: ChannelSpec::awgn(10.0),
        }
    }

    #[test]
    fn tiny8_builds() {
        let m = build_static(&cfg("tiny-8", &[1, 16, 16], 4), &mut seeded_rng(0)).unwrap();
        let e = m.exits[0];
        assert_eq!(m.graph.shape(e.transmitted), &[TX_DIM]);
        assert_eq!(m.graph.shape(e.probs), &[4]);
        let convs = m.graph.nodes().iter().filter(|n| n.kind.conv_spec().is_some()).count();
        assert_eq!(convs, 9);
    }

    #[test]
    fn resnet20_feature_width() {
        let m = build_static(&cfg("resnet20", &[3, 32, 32], 100), &mut seeded_rng(0)).unwrap();
        let e = m.exits[0];
        assert_eq!(m.graph.shape(e.feature), &[64]);
        let fc1 = m.graph.find("enc1_fc1").unwrap();
        assert_eq!(m.graph.node(fc1).kind, LayerKind::Linear { d_in: 64, d_out: CODEC_HIDDEN });
        let fc2 = m.graph.find("enc1_fc2").unwrap();
        assert_eq!(m.graph.node(fc2).kind, LayerKind::Linear { d_in: CODEC_HIDDEN, d_out: TX_DIM });
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(build_static(&cfg("tiny-8", &[1, 16, 16], 0), &mut seeded_rng(0)).is_err());
        assert!("resnet21".parse::<Depth>().is_err());
        assert!("wide".parse::<Depth>().is_err());
        assert_eq!("110".parse::<Depth>().unwrap(), Depth::ResNet(110));
    }
}
