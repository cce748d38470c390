//! End-to-end pipeline shared by the static and dynamic models: feature
//! encoder, per-exit channel codec, channel, and receiver inference head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{self, Convention, ExitTaps, FlopsProfile};
use crate::link::{self, ChannelSpec, TX_DIM};
use crate::nn::{Executor, LayerKind, Mode, NetworkGraph, Node, NodeId, ParameterSet, Role};
use crate::tensor::{argmax, softmax_row, Tensor};
use crate::SeededRng;

/// Node ids of one exit, from the transmitted feature to the receiver output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitNodes {
    pub feature: NodeId,
    /// Transmitter-side confidence logits; absent on the static model.
    pub confidence: Option<NodeId>,
    /// Channel encoder output before power normalization.
    pub encoded: NodeId,
    pub transmitted: NodeId,
    pub received: NodeId,
    pub decoded: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Appends codec, link and receiver head for exit `k` on top of `feature`.
pub fn attach_exit(
    graph: &mut NetworkGraph,
    feature: NodeId,
    confidence: Option<NodeId>,
    spec: ChannelSpec,
    k: usize,
    num_classes: usize,
) -> Result<ExitNodes> {
    let encoded = link::add_channel_encoder(graph, feature, k)?;
    let (transmitted, received) = link::add_link(graph, encoded, spec, k)?;
    let decoded = link::add_channel_decoder(graph, received, k)?;
    let logits = graph.add_node(
        Node::new(
            format!("rx{k}_head"),
            LayerKind::Linear {
                d_in: TX_DIM,
                d_out: num_classes,
            },
            &[decoded],
        )
        .role(Role::Receiver(k)),
    )?;
    let probs = graph.add_node(Node::new(format!("rx{k}_softmax"), LayerKind::Softmax, &[logits]).role(Role::Receiver(k)))?;
    Ok(ExitNodes {
        feature,
        confidence,
        encoded,
        transmitted,
        received,
        decoded,
        logits,
        probs,
    })
}

/// Max softmax probability of one logit row.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Config(format!("confidence needs at least 2 classes, got {}", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut p = vec![0.0; logits.len()];
    softmax_row(logits, &mut p);
    Ok(p[argmax(logits)])
}

/// Result of evaluating exit k alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutput {
    pub exit: usize,
    pub feature: Tensor,
    pub logits: Tensor,
    pub confidence: Vec<f64>,
}

/// Per-sample view of every exit, used for calibration and budgeted runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPass {
    /// `confidences[j][k]`: transmitter confidence of sample j at exit k+1.
    pub confidences: Vec<Vec<f64>>,
    /// `predictions[j][k]`: receiver prediction of sample j via exit k+1.
    pub predictions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Static,
    Dynamic,
}

/// A built pipeline with its parameters.
#[derive(Debug, Clone)]
pub struct TocModel {
    pub kind: ModelKind,
    pub name: String,
    pub graph: NetworkGraph,
    pub exits: Vec<ExitNodes>,
    pub params: ParameterSet,
    pub num_classes: usize,
    /// Encoder block (dense layer) each exit sits after; empty for static models.
    pub exit_blocks: Vec<usize>,
}

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 256;

impl TocModel {
    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn input_shape(&self) -> Result<&[usize]> {
        Ok(self.graph.shape(self.graph.input()?))
    }

    pub fn channel(&self) -> Option<ChannelSpec> {
        self.graph.nodes().iter().find_map(|n| match n.kind {
            LayerKind::Channel(s) => Some(s),
            _ => None,
        })
    }

    pub fn set_channel(&mut self, spec: ChannelSpec) {
        self.graph.set_channel(spec);
    }

    pub fn taps(&self) -> Vec<ExitTaps> {
        self.exits
            .iter()
            .map(|e| ExitTaps {
                confidence: e.confidence,
                transmitted: e.transmitted,
                receiver: e.probs,
            })
            .collect()
    }

    pub fn profile(&self, convention: Convention) -> Result<FlopsProfile> {
        flops::profile_graph(&self.graph, &self.taps(), convention)
    }

    /// Transmitter costs `C_k` as floats.
    pub fn costs(&self, convention: Convention) -> Result<Vec<f64>> {
        Ok(self.profile(convention)?.costs())
    }

    fn check_exit(&self, k: usize) -> Result<&ExitNodes> {
        if k == 0 || k > self.exits.len() {
            return Err(Error::ExitOutOfRange {
                index: k,
                exits: self.exits.len(),
            });
        }
        Ok(&self.exits[k - 1])
    }

    /// Evaluates the feature and confidence of exit `k` on an executor that
    /// already holds the input. Work done for earlier exits is reused.
    pub fn forward_to_exit(&self, ex: &mut Executor<'_>, k: usize) -> Result<ExitOutput> {
        let nodes = *self.check_exit(k)?;
        for j in 0..k {
            if let Some(c) = self.exits[j].confidence {
                ex.eval(c)?;
            }
        }
        let feature = ex.eval(nodes.feature)?.clone();
        let (logits, confidence) = match nodes.confidence {
            Some(c) => {
                let l = ex.eval(c)?.clone();
                let conf = (0..l.batch()).map(|i| confidence(l.sample(i))).collect::<Result<_>>()?;
                (l, conf)
            }
            None => {
                let l = ex.eval(nodes.logits)?.clone();
                let conf = (0..l.batch()).map(|i| confidence(l.sample(i))).collect::<Result<_>>()?;
                (l, conf)
            }
        };
        Ok(ExitOutput {
            exit: k,
            feature,
            logits,
            confidence,
        })
    }

    /// Evaluates every exit on `x` in eval mode, in fixed-size batches.
    /// Each exit's channel draws its own noise from `rng`.
    pub fn exit_pass(&self, x: &Tensor, rng: &mut SeededRng) -> Result<ExitPass> {
        run_exits(&self.graph, &self.params, &self.exits, x, rng)
    }

    /// [`Self::exit_pass`] with the channel replaced by `spec`.
    pub fn exit_pass_under(&self, spec: ChannelSpec, x: &Tensor, rng: &mut SeededRng) -> Result<ExitPass> {
        let mut graph = self.graph.clone();
        graph.set_channel(spec);
        run_exits(&graph, &self.params, &self.exits, x, rng)
    }

    /// Receiver predictions through the last exit.
    pub fn predict(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Vec<usize>> {
        let pass = self.exit_pass(x, rng)?;
        let k = self.exits.len();
        Ok(pass.predictions.iter().map(|p| p[k - 1]).collect())
    }
}

fn run_exits(graph: &NetworkGraph, params: &ParameterSet, exits: &[ExitNodes], x: &Tensor, rng: &mut SeededRng) -> Result<ExitPass> {
    let n = x.batch();
    let mut confidences = Vec::with_capacity(n);
    let mut predictions = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let xb = x.select(chunk);
        let mut ex = Executor::new(graph, params, Mode::Eval, rng);
        ex.feed_input(xb)?;
        let mut conf_cols = Vec::new();
        let mut pred_cols = Vec::new();
        for e in exits {
            if let Some(c) = e.confidence {
                let l = ex.eval(c)?;
                conf_cols.push((0..l.batch()).map(|i| confidence(l.sample(i))).collect::<Result<Vec<_>>>()?);
            }
            pred_cols.push(ex.eval(e.logits)?.argmax_rows());
        }
        for i in 0..chunk.len() {
            confidences.push(conf_cols.iter().map(|c| c[i]).collect());
            predictions.push(pred_cols.iter().map(|p| p[i]).collect());
        }
    }
    Ok(ExitPass {
        confidences,
        predictions,
    })
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Config("cannot score an empty split".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_examples() {
        assert!((confidence(&[1.0; 4]).unwrap() - 0.25).abs() < 1e-15);
        let e2 = 2f64.exp();
        assert!((confidence(&[2.0, 0.0]).unwrap() - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((confidence(&[2.0, 0.0]).unwrap() - 0.880_797).abs() < 1e-6);
        let a = confidence(&[0.3, -1.2, 2.2]).unwrap();
        let b = confidence(&[100.3, 98.8, 102.2]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(confidence(&[f64::NAN, 1.0]).is_err());
        assert!(confidence(&[1.0]).is_err());
    }

    #[test]
    fn accuracy_of_constant_predictor() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        assert_eq!(accuracy(&[0; 40], &labels).unwrap(), 0.25);
        assert!(accuracy(&[], &[]).is_err());
    }
}
