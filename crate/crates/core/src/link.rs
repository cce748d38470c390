//! Wireless link: power normalization, PSNR-parameterized AWGN and Rayleigh
//! channels, and the small linear channel encoder/decoder networks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Executor, LayerKind, Mode, NetworkGraph, Node, NodeId, ParameterSet, Role};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Width of the transmitted feature vector.
pub const TX_DIM: usize = 16;
/// Hidden width of the channel encoder and decoder.
pub const CODEC_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
    Noiseless,
}

impl ChannelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
            ChannelKind::Noiseless => "noiseless",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            "noiseless" => Ok(ChannelKind::Noiseless),
            other => Err(Error::Config(format!("unknown channel kind `{other}`"))),
        }
    }
}

/// Channel model; transmitted signals always have unit power, so the noise
/// variance follows from the PSNR alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    #[serde(default)]
    pub psnr_db: f64,
}

impl ChannelSpec {
    pub const SIGNAL_POWER: f64 = 1.0;

    pub fn awgn(psnr_db: f64) -> Self {
        Self {
            kind: ChannelKind::Awgn,
            psnr_db,
        }
    }

    pub fn rayleigh(psnr_db: f64) -> Self {
        Self {
            kind: ChannelKind::Rayleigh,
            psnr_db,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            kind: ChannelKind::Noiseless,
            psnr_db: 0.0,
        }
    }

    pub fn noise_var(&self) -> f64 {
        match self.kind {
            ChannelKind::Noiseless => 0.0,
            _ => Self::SIGNAL_POWER * 10f64.powf(-self.psnr_db / 10.0),
        }
    }

    /// Short label such as `awgn@12dB`.
    pub fn label(&self) -> String {
        match self.kind {
            ChannelKind::Noiseless => "noiseless".to_string(),
            k => format!("{}@{}dB", k.as_str(), self.psnr_db),
        }
    }
}

/// Noise variance giving `psnr_db` for signal power `power`.
pub fn noise_var_from_psnr(psnr_db: f64, power: f64) -> Result<f64> {
    if !(power > 0.0) {
        return Err(Error::Config(format!("signal power must be > 0, got {power}")));
    }
    Ok(power * 10f64.powf(-psnr_db / 10.0))
}

/// Per-sample scale factors that bring each row of `x` to unit mean square.
pub(crate) fn power_scales(x: &Tensor) -> Result<Vec<f64>> {
    let d = x.sample_len() as f64;
    (0..x.batch())
        .map(|i| {
            let ss: f64 = x.sample(i).iter().map(|v| v * v).sum();
            if ss > 0.0 {
                Ok((d / ss).sqrt())
            } else {
                Err(Error::ZeroPower { sample: i })
            }
        })
        .collect()
}

/// Scales every sample (leading-dimension row) to mean square 1.
pub fn normalize_power(x: &Tensor) -> Result<Tensor> {
    let scales = power_scales(x)?;
    let n = x.sample_len();
    let mut out = x.clone();
    for (row, s) in out.data_mut().chunks_mut(n).zip(&scales) {
        for v in row {
            *v *= s;
        }
    }
    Ok(out)
}

/// Draws one Rayleigh gain with unit second moment.
pub fn rayleigh_gain(rng: &mut SeededRng) -> f64 {
    let g1: f64 = rng.sample(StandardNormal);
    let g2: f64 = rng.sample(StandardNormal);
    (g1 * g1 + g2 * g2).sqrt() / std::f64::consts::SQRT_2
}

/// Passes `x` through the channel, returning the received signal and the
/// per-sample gain that was applied.
pub fn transmit_with_gains(x: &Tensor, spec: &ChannelSpec, rng: &mut SeededRng) -> (Tensor, Vec<f64>) {
    let n = x.sample_len();
    let mut y = x.clone();
    let mut gains = vec![1.0; x.batch()];
    if spec.kind == ChannelKind::Noiseless {
        return (y, gains);
    }
    let sigma = spec.noise_var().sqrt();
    for (row, h) in y.data_mut().chunks_mut(n).zip(gains.iter_mut()) {
        if spec.kind == ChannelKind::Rayleigh {
            *h = rayleigh_gain(rng);
        }
        for v in row {
            let eps: f64 = rng.sample(StandardNormal);
            *v = *h * *v + sigma * eps;
        }
    }
    (y, gains)
}

/// `y = h x + noise` with one gain per sample.
pub fn transmit(x: &Tensor, spec: &ChannelSpec, rng: &mut SeededRng) -> Tensor {
    transmit_with_gains(x, spec, rng).0
}

/// PSNR implied by the empirical noise variance of `y - x` at unit signal power.
pub fn measured_psnr(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.len() as f64;
    let diffs: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| b - a).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    10.0 * (ChannelSpec::SIGNAL_POWER / var).log10()
}

/// Appends the channel encoder (Linear 128 + ReLU, Linear 16) for exit `exit`.
/// Returns the pre-normalization output node.
pub fn add_channel_encoder(graph: &mut NetworkGraph, feature: NodeId, exit: usize) -> Result<NodeId> {
    let d_in: usize = graph.shape(feature).iter().product();
    let role = Role::ChannelEncoder(exit);
    let fc1 = graph.add_node(
        Node::new(format!("enc{exit}_fc1"), LayerKind::Linear { d_in, d_out: CODEC_HIDDEN }, &[feature]).role(role),
    )?;
    let r1 = graph.add_node(Node::new(format!("enc{exit}_relu1"), LayerKind::Relu, &[fc1]).role(role))?;
    graph.add_node(
        Node::new(
            format!("enc{exit}_fc2"),
            LayerKind::Linear {
                d_in: CODEC_HIDDEN,
                d_out: TX_DIM,
            },
            &[r1],
        )
        .role(role),
    )
}

/// Appends the channel decoder: L1 (16, ReLU), L2 (128, ReLU), L3 (16) and a
/// layer norm over the sum of the L1 and L3 outputs.
pub fn add_channel_decoder(graph: &mut NetworkGraph, received: NodeId, exit: usize) -> Result<NodeId> {
    let role = Role::ChannelDecoder(exit);
    let lin = |d_in, d_out| LayerKind::Linear { d_in, d_out };
    let l1 = graph.add_node(Node::new(format!("dec{exit}_l1"), lin(TX_DIM, TX_DIM), &[received]).role(role))?;
    let r1 = graph.add_node(Node::new(format!("dec{exit}_relu1"), LayerKind::Relu, &[l1]).role(role))?;
    let l2 = graph.add_node(Node::new(format!("dec{exit}_l2"), lin(TX_DIM, CODEC_HIDDEN), &[r1]).role(role))?;
    let r2 = graph.add_node(Node::new(format!("dec{exit}_relu2"), LayerKind::Relu, &[l2]).role(role))?;
    let l3 = graph.add_node(Node::new(format!("dec{exit}_l3"), lin(CODEC_HIDDEN, TX_DIM), &[r2]).role(role))?;
    let sum = graph.add_node(Node::new(format!("dec{exit}_sum"), LayerKind::Add, &[r1, l3]).role(role))?;
    graph.add_node(Node::new(format!("dec{exit}_norm"), LayerKind::LayerNorm { dim: TX_DIM }, &[sum]).role(role))
}

/// Appends power normalization and the channel node after an encoder output.
/// Returns `(normalized, received)`.
pub fn add_link(graph: &mut NetworkGraph, encoded: NodeId, spec: ChannelSpec, exit: usize) -> Result<(NodeId, NodeId)> {
    let norm = graph.add_node(
        Node::new(format!("tx{exit}_power"), LayerKind::PowerNormalize, &[encoded]).role(Role::ChannelEncoder(exit)),
    )?;
    let ch = graph.add_node(Node::new(format!("channel{exit}"), LayerKind::Channel(spec), &[norm]).role(Role::Channel(exit)))?;
    Ok((norm, ch))
}

/// A standalone channel encoder/decoder pair for one feature width.
#[derive(Debug, Clone)]
pub struct Codec {
    enc_graph: NetworkGraph,
    enc_out: NodeId,
    dec_graph: NetworkGraph,
    dec_out: NodeId,
    pub encoder_params: ParameterSet,
    pub decoder_params: ParameterSet,
}

impl Codec {
    pub fn new(feature_width: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut enc_graph = NetworkGraph::new();
        let x = enc_graph.add("feature", LayerKind::Input { shape: vec![feature_width] }, &[])?;
        let enc_out = add_channel_encoder(&mut enc_graph, x, 1)?;
        let mut dec_graph = NetworkGraph::new();
        let y = dec_graph.add("received", LayerKind::Input { shape: vec![TX_DIM] }, &[])?;
        let dec_out = add_channel_decoder(&mut dec_graph, y, 1)?;
        let encoder_params = ParameterSet::init(&enc_graph, rng);
        let decoder_params = ParameterSet::init(&dec_graph, rng);
        Ok(Self {
            enc_graph,
            enc_out,
            dec_graph,
            dec_out,
            encoder_params,
            decoder_params,
        })
    }

    pub fn encoder_graph(&self) -> &NetworkGraph {
        &self.enc_graph
    }

    pub fn decoder_graph(&self) -> &NetworkGraph {
        &self.dec_graph
    }

    pub fn feature_width(&self) -> usize {
        self.enc_graph.shape(0)[0]
    }

    /// Encoder forward pass: `[N, width] -> [N, 16]` (before power normalization).
    pub fn encode(&self, m: &Tensor) -> Result<Tensor> {
        if m.sample_len() != self.feature_width() {
            return Err(Error::shape(
                "feature",
                format!("expected width {}, got {}", self.feature_width(), m.sample_len()),
            ));
        }
        run_eval(&self.enc_graph, &self.encoder_params, m, self.enc_out)
    }

    /// Decoder forward pass: `[N, 16] -> [N, 16]`.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        if y.sample_len() != TX_DIM {
            return Err(Error::shape(
                "received",
                format!("expected width {TX_DIM}, got {}", y.sample_len()),
            ));
        }
        run_eval(&self.dec_graph, &self.decoder_params, y, self.dec_out)
    }
}

fn run_eval(graph: &NetworkGraph, params: &ParameterSet, x: &Tensor, out: NodeId) -> Result<Tensor> {
    let mut rng = crate::seeded_rng(0);
    let mut ex = Executor::new(graph, params, Mode::Eval, &mut rng);
    ex.feed_input(x.clone())?;
    Ok(ex.eval(out)?.clone())
}
