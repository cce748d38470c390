//! Multi-exit, multi-scale densely connected feature encoder.
//!
//! Layer 1 builds one feature map per scale, each scale derived from the one
//! above it by a (possibly strided) convolution. Every later layer adds `g_v`
//! new channels at scale v: at scale 1 from all earlier scale-1 outputs, at
//! coarser scales from a strided transform of all earlier scale-(v-1)
//! outputs concatenated with a transform of all earlier scale-v outputs.
//! Exits sit on the coarsest scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{self, Convention};
use crate::link::ChannelSpec;
use crate::nn::{ConvSpec, LayerKind, NetworkGraph, Node, NodeId, ParameterSet, Role};
use crate::pipeline::{attach_exit, ModelKind, TocModel};
use crate::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicConfig {
    /// Number of scales V.
    pub scales: usize,
    /// Number of exits K.
    pub exits: usize,
    /// Growth rate g at scale 1.
    pub growth: usize,
    /// Dense layers (blocks) in the encoder.
    pub blocks: usize,
    /// Channel multiplier of each scale relative to the one above.
    pub tau: Vec<usize>,
    /// Spatial ratio of each scale relative to the one above (scale 1: to the input).
    pub iota: Vec<f64>,
    /// Bottleneck width factor.
    pub bottleneck: usize,
    /// Channels of the first scale-1 feature map.
    pub initial_channels: usize,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    pub channel: ChannelSpec,
    #[serde(default)]
    pub convention: Convention,
}

impl DynamicConfig {
    /// Two scales and three exits on 16x16 grayscale input.
    pub fn desk(num_classes: usize, channel: ChannelSpec) -> Self {
        Self {
            scales: 2,
            exits: 3,
            growth: 4,
            blocks: 6,
            tau: vec![1, 2],
            iota: vec![1.0, 0.5],
            bottleneck: 4,
            initial_channels: 8,
            num_classes,
            input_shape: vec![1, 16, 16],
            channel,
            convention: Convention::AllLayers,
        }
    }

    /// Three scales and five exits on 32x32 colour input.
    pub fn cifar(num_classes: usize, channel: ChannelSpec) -> Self {
        Self {
            scales: 3,
            exits: 5,
            growth: 6,
            blocks: 10,
            tau: vec![1, 2, 2],
            iota: vec![1.0, 0.5, 0.5],
            bottleneck: 4,
            initial_channels: 16,
            num_classes,
            input_shape: vec![3, 32, 32],
            channel,
            convention: Convention::AllLayers,
        }
    }

    fn validate(&self) -> Result<Vec<usize>> {
        let err = |m: String| Err(Error::Config(m));
        if self.exits < 2 {
            return err(format!("need at least 2 exits, got {}", self.exits));
        }
        if self.scales == 0 || self.tau.len() != self.scales || self.iota.len() != self.scales {
            return err(format!(
                "scale layout inconsistent: {} scales, tau {:?}, iota {:?}",
                self.scales, self.tau, self.iota
            ));
        }
        if self.tau.contains(&0) {
            return err(format!("tau must be >= 1, got {:?}", self.tau));
        }
        if self.growth == 0 || self.initial_channels == 0 || self.bottleneck == 0 {
            return err("growth, initial channels and bottleneck must be >= 1".into());
        }
        if self.scales > 1 && self.growth * self.tau[1..].iter().product::<usize>() < 2 {
            return err("coarse-scale growth must be >= 2".into());
        }
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.exits > self.blocks {
            return err(format!("{} exits do not fit in {} blocks", self.exits, self.blocks));
        }
        if self.input_shape.len() != 3 {
            return err(format!("input shape must be [C, H, W], got {:?}", self.input_shape));
        }
        let mut strides = Vec::new();
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for &i in &self.iota {
            if !(i > 0.0 && i <= 1.0) {
                return err(format!("iota must lie in (0, 1], got {i}"));
            }
            let s = (1.0 / i).round() as usize;
            if ((1.0 / s as f64) - i).abs() > 1e-9 {
                return err(format!("iota {i} is not the reciprocal of an integer stride"));
            }
            h = h.div_ceil(s);
            w = w.div_ceil(s);
            if h == 0 || w == 0 {
                return err("input too small for the scale layout".into());
            }
            strides.push(s);
        }
        Ok(strides)
    }

    /// Channels of the first feature map and growth at each scale.
    pub fn scale_widths(&self) -> Vec<(usize, usize)> {
        let mut m = 1;
        self.tau
            .iter()
            .map(|t| {
                m *= t;
                (self.initial_channels * m, self.growth * m)
            })
            .collect()
    }
}

/// Where exits go and how far they are from even spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPlacement {
    /// 1-based block index of each exit.
    pub blocks: Vec<usize>,
    /// Largest `|cum[b_k] - k * total / K| / (k * total / K)`.
    pub max_rel_deviation: f64,
}

/// Places K exits at the blocks whose cumulative cost is nearest to
/// `k * total / K`, keeping the blocks strictly increasing.
pub fn place_exits(cumulative: &[f64], k: usize) -> Result<ExitPlacement> {
    let n = cumulative.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot place {k} exits in {n} blocks")));
    }
    if cumulative[0] <= 0.0 || cumulative.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("cumulative block costs must be positive and strictly increasing".into()));
    }
    let total = cumulative[n - 1];
    let mut blocks = Vec::with_capacity(k);
    let mut dev: f64 = 0.0;
    let mut prev = 0;
    for j in 1..=k {
        let target = j as f64 * total / k as f64;
        let lo = prev + 1;
        let hi = n - (k - j);
        let best = (lo..=hi)
            .min_by(|&a, &b| {
                (cumulative[a - 1] - target)
                    .abs()
                    .total_cmp(&(cumulative[b - 1] - target).abs())
            })
            .expect("non-empty range");
        dev = dev.max((cumulative[best - 1] - target).abs() / target);
        blocks.push(best);
        prev = best;
    }
    Ok(ExitPlacement {
        blocks,
        max_rel_deviation: dev,
    })
}

struct Dense<'a> {
    g: &'a mut NetworkGraph,
    bottleneck: usize,
}

impl Dense<'_> {
    fn conv_bn_relu(&mut self, name: &str, x: NodeId, c_out: usize, k: usize, stride: usize, at: (usize, usize)) -> Result<NodeId> {
        let c_in = self.g.shape(x)[0];
        let spec = ConvSpec::new(c_in, c_out, k, stride);
        let kind = if stride > 1 { LayerKind::StridedConv(spec) } else { LayerKind::Conv(spec) };
        let c = self.g.add_node(Node::new(format!("{name}_conv"), kind, &[x]).at(at.0, at.1))?;
        let b = self
            .g
            .add_node(Node::new(format!("{name}_bn"), LayerKind::BatchNorm { channels: c_out }, &[c]).at(at.0, at.1))?;
        self.g
            .add_node(Node::new(format!("{name}_relu"), LayerKind::Relu, &[b]).at(at.0, at.1))
    }

    /// Optional 1x1 bottleneck to `bottleneck * c_out` channels, then a 3x3 conv.
    fn branch(&mut self, name: &str, x: NodeId, c_out: usize, stride: usize, at: (usize, usize)) -> Result<NodeId> {
        let c_in = self.g.shape(x)[0];
        let width = self.bottleneck * c_out;
        let h = if c_in > width {
            self.conv_bn_relu(&format!("{name}_bott"), x, width, 1, 1, at)?
        } else {
            x
        };
        self.conv_bn_relu(name, h, c_out, 3, stride, at)
    }

    fn stack(&mut self, name: &str, parts: &[NodeId], at: (usize, usize)) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.g.add_node(Node::new(name, LayerKind::Concat, parts).at(at.0, at.1))
    }
}

/// The dense multi-scale backbone: per-scale lists of layer outputs.
struct Backbone {
    graph: NetworkGraph,
    outputs: Vec<Vec<NodeId>>,
}

fn build_backbone(cfg: &DynamicConfig, strides: &[usize]) -> Result<Backbone> {
    let widths = cfg.scale_widths();
    let mut graph = NetworkGraph::new();
    let x = graph.add(
        "image",
        LayerKind::Input {
            shape: cfg.input_shape.clone(),
        },
        &[],
    )?;
    let mut d = Dense {
        g: &mut graph,
        bottleneck: cfg.bottleneck,
    };
    let v_count = cfg.scales;
    let mut outputs: Vec<Vec<NodeId>> = vec![Vec::new(); v_count];
    let mut prev = x;
    for v in 0..v_count {
        let h = d.conv_bn_relu(&format!("s{}_l1", v + 1), prev, widths[v].0, 3, strides[v], (v + 1, 1))?;
        outputs[v].push(h);
        prev = h;
    }
    for l in 2..=cfg.blocks {
        let mut new = Vec::with_capacity(v_count);
        for v in 0..v_count {
            let at = (v + 1, l);
            let tag = format!("s{}_l{l}", v + 1);
            let same = d.stack(&format!("{tag}_in"), &outputs[v], at)?;
            let out = if v == 0 {
                d.branch(&tag, same, widths[0].1, 1, at)?
            } else {
                let g_v = widths[v].1;
                let coarse_in = d.stack(&format!("{tag}_from{}", v), &outputs[v - 1], at)?;
                let a = d.branch(&format!("{tag}_down"), coarse_in, g_v / 2, strides[v], at)?;
                let b = d.branch(&format!("{tag}_same"), same, g_v - g_v / 2, 1, at)?;
                d.g.add_node(Node::new(format!("{tag}_cat"), LayerKind::Concat, &[a, b]).at(at.0, at.1))?
            };
            new.push(out);
        }
        // Outputs of layer l join the stacks only after every scale consumed layer l-1.
        for (v, o) in new.into_iter().enumerate() {
            outputs[v].push(o);
        }
    }
    Ok(Backbone { graph, outputs })
}

/// Per-block encoder cost, block l covering every node tagged with layer l.
pub fn block_costs(graph: &NetworkGraph, blocks: usize, convention: Convention) -> Vec<f64> {
    let mut costs = vec![0.0; blocks];
    for (id, n) in graph.nodes().iter().enumerate() {
        if let Some(l) = n.layer {
            costs[l - 1] += flops::layer_flops(graph, id, convention) as f64;
        }
    }
    costs
}

/// Builds the dynamic pipeline, places exits by cost and initializes parameters.
pub fn build_dynamic(cfg: &DynamicConfig, rng: &mut SeededRng) -> Result<(TocModel, ExitPlacement)> {
    let strides = cfg.validate()?;
    let Backbone { mut graph, outputs } = build_backbone(cfg, &strides)?;
    let costs = block_costs(&graph, cfg.blocks, cfg.convention);
    let cumulative: Vec<f64> = costs
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c;
            Some(*acc)
        })
        .collect();
    let placement = place_exits(&cumulative, cfg.exits)?;
    let coarsest = &outputs[cfg.scales - 1];
    let mut exits = Vec::with_capacity(cfg.exits);
    for (i, &b) in placement.blocks.iter().enumerate() {
        let k = i + 1;
        let stack = if b == 1 {
            coarsest[0]
        } else {
            graph.add_node(Node::new(format!("exit{k}_stack"), LayerKind::Concat, &coarsest[..b]))?
        };
        let pool = graph.add_node(Node::new(format!("exit{k}_pool"), LayerKind::GlobalPool, &[stack]))?;
        let width = graph.shape(pool)[0];
        let conf = graph.add_node(
            Node::new(
                format!("exit{k}_conf"),
                LayerKind::Linear {
                    d_in: width,
                    d_out: cfg.num_classes,
                },
                &[pool],
            )
            .role(Role::ConfidenceHead(k)),
        )?;
        exits.push(attach_exit(&mut graph, pool, Some(conf), cfg.channel, k, cfg.num_classes)?);
    }
    let targets: Vec<NodeId> = exits.iter().map(|e| e.probs).collect();
    graph.validate(&targets)?;
    let params = ParameterSet::init(&graph, rng);
    let model = TocModel {
        kind: ModelKind::Dynamic,
        name: format!("dynamic-v{}k{}", cfg.scales, cfg.exits),
        graph,
        exits,
        params,
        num_classes: cfg.num_classes,
        exit_blocks: placement.blocks.clone(),
    };
    Ok((model, placement))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn placement_examples() {
        let uniform: Vec<f64> = (1..=12).map(|i| i as f64).collect();
        assert_eq!(place_exits(&uniform, 3).unwrap().blocks, vec![4, 8, 12]);
        assert_eq!(place_exits(&uniform, 3).unwrap().max_rel_deviation, 0.0);
        let p = place_exits(&[1.0, 2.0, 4.0, 6.0, 10.0, 14.0], 2).unwrap();
        assert_eq!(p.blocks, vec![4, 6]);
        assert_eq!(place_exits(&uniform, 12).unwrap().blocks, (1..=12).collect::<Vec<_>>());
        assert!(place_exits(&uniform, 13).is_err());
    }

    #[test]
    fn desk_preset_builds() {
        let cfg = DynamicConfig::desk(4, ChannelSpec::awgn(12.0));
        let (m, placement) = build_dynamic(&cfg, &mut seeded_rng(0)).unwrap();
        assert_eq!(m.num_exits(), 3);
        assert_eq!(placement.blocks.len(), 3);
        assert_eq!(*placement.blocks.last().unwrap(), cfg.blocks);
        let costs = m.costs(Convention::AllLayers).unwrap();
        assert!(costs.windows(2).all(|w| w[1] > w[0]), "{costs:?}");
    }

    #[test]
    fn rejects_inconsistent_layouts() {
        let mut cfg = DynamicConfig::desk(4, ChannelSpec::noiseless());
        cfg.tau = vec![1];
        assert!(build_dynamic(&cfg, &mut seeded_rng(0)).is_err());
        let mut cfg = DynamicConfig::desk(4, ChannelSpec::noiseless());
        cfg.exits = 1;
        assert!(build_dynamic(&cfg, &mut seeded_rng(0)).is_err());
        let mut cfg = DynamicConfig::desk(4, ChannelSpec::noiseless());
        cfg.iota = vec![1.0, 0.4];
        assert!(build_dynamic(&cfg, &mut seeded_rng(0)).is_err());
    }
}
