//! Joint end-to-end training through the simulated channel, the task losses,
//! and an empirical convergence diagnostic for SGD.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{cifar, Dataset, Splits};
use crate::error::{Error, Result};
use crate::nn::{backward, checkpoint, forward, forward_shared_channel, sgd_step, Activations, Mode, OptimizerState};
use crate::pipeline::{TocModel, EVAL_BATCH};
use crate::tensor::{softmax_row, Tensor};
use crate::{seeded_rng, SeededRng};

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs (0-based) from which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Per-exit loss weights; all ones when empty.
    pub loss_weights: Vec<f64>,
    /// Also train the transmitter confidence heads with cross-entropy.
    pub confidence_loss: bool,
    /// Random pad-and-crop plus flip, with this padding; 0 disables.
    pub augment_pad: usize,
    /// All exits see one channel noise draw per step instead of independent draws.
    pub shared_exit_noise: bool,
    /// Before each validation, reset batch-norm running statistics to the
    /// average over this many training batches under the current weights;
    /// 0 keeps the moving averages.
    pub precise_bn_batches: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::table_static()
    }
}

impl TrainConfig {
    /// Static-model hyperparameters of the reference setup.
    pub fn table_static() -> Self {
        Self {
            epochs: 164,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
            seed: 0,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            loss_weights: Vec::new(),
            confidence_loss: true,
            augment_pad: 0,
            shared_exit_noise: false,
            precise_bn_batches: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    /// Dynamic-model hyperparameters of the reference setup.
    pub fn table_dynamic() -> Self {
        Self {
            epochs: 300,
            lr_milestones: vec![100, 200, 300],
            ..Self::table_static()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    fn weights(&self, k: usize) -> Result<Vec<f64>> {
        if self.loss_weights.is_empty() {
            return Ok(vec![1.0; k]);
        }
        if self.loss_weights.len() != k {
            return Err(Error::Config(format!("{} loss weights for {k} exits", self.loss_weights.len())));
        }
        Ok(self.loss_weights.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Mean squared gradient norm over the epoch's steps.
    pub grad_norm_sq: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Squared gradient norm of every step.
    pub step_grad_norm_sq: Vec<f64>,
    /// Excluded from all report files so reruns stay byte-identical.
    pub wall_time_s: f64,
}

impl TrainTrace {
    /// Same epochs and gradient norms, ignoring wall time.
    pub fn same_run(&self, other: &TrainTrace) -> bool {
        self.epochs == other.epochs && self.step_grad_norm_sq == other.step_grad_norm_sq
    }

    /// CSV with columns `epoch,split,loss,grad_norm_sq,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,grad_norm_sq,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},train,{},{},{}", e.epoch, e.train_loss, e.grad_norm_sq, e.lr);
            let _ = writeln!(s, "{},val,{},,{}", e.epoch, e.val_loss, e.lr);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    /// Cheapest and most expensive exit costs of the trained model.
    pub flops_min: u64,
    pub flops_max: u64,
}

/// Mean cross-entropy `-log p[label]` with the log clamped at [`LOG_CLAMP`].
pub fn static_loss(labels: &[usize], probs: &Tensor) -> Result<f64> {
    if probs.rank() != 2 || probs.batch() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "loss",
            format!("{} labels against predictions {:?}", labels.len(), probs.shape()),
        ));
    }
    let m = probs.sample_len();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= m {
            return Err(Error::shape("loss", format!("label {l} out of range for {m} classes")));
        }
        total -= probs.sample(i)[l].max(LOG_CLAMP).ln();
    }
    Ok(total / labels.len() as f64)
}

/// `sum_k w_k CE_k` over per-exit predictions.
pub fn dynamic_loss(per_exit: &[Tensor], labels: &[usize], weights: &[f64]) -> Result<f64> {
    if per_exit.len() != weights.len() {
        return Err(Error::Config(format!("{} exits but {} weights", per_exit.len(), weights.len())));
    }
    let mut total = 0.0;
    for (p, w) in per_exit.iter().zip(weights) {
        total += w * static_loss(labels, p)?;
    }
    Ok(total)
}

/// Softmax cross-entropy of a logit tensor and its gradient, scaled by `weight`.
fn ce_from_logits(logits: &Tensor, labels: &[usize], weight: f64) -> (f64, Tensor) {
    let n = labels.len() as f64;
    let m = logits.sample_len();
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[i * m..(i + 1) * m];
        softmax_row(logits.sample(i), row);
        loss -= row[l].max(LOG_CLAMP).ln();
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= weight / n;
        }
    }
    (loss / n, grad)
}

struct StepLoss {
    /// Weighted receiver cross-entropy.
    task: f64,
    seeds: Vec<(usize, Tensor)>,
}

fn step_loss(model: &TocModel, acts: &Activations, labels: &[usize], weights: &[f64], with_confidence: bool) -> Result<StepLoss> {
    let mut task = 0.0;
    let mut seeds = Vec::new();
    for (e, &w) in model.exits.iter().zip(weights) {
        let logits = acts
            .get(e.logits)
            .ok_or_else(|| Error::MissingActivation(model.graph.node(e.logits).name.clone()))?;
        let (l, g) = ce_from_logits(logits, labels, w);
        task += w * l;
        seeds.push((e.logits, g));
        if let (true, Some(c)) = (with_confidence, e.confidence) {
            let logits = acts
                .get(c)
                .ok_or_else(|| Error::MissingActivation(model.graph.node(c).name.clone()))?;
            let (_, g) = ce_from_logits(logits, labels, w);
            seeds.push((c, g));
        }
    }
    Ok(StepLoss { task, seeds })
}

/// Task loss and last-exit accuracy in eval mode. Empty `weights` means unit weights.
pub fn evaluate_loss(model: &TocModel, data: &Dataset, weights: &[f64], rng: &mut SeededRng) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let k = model.num_exits();
    let weights = match weights.len() {
        0 => vec![1.0; k],
        n if n == k => weights.to_vec(),
        n => return Err(Error::Config(format!("{n} loss weights for {k} exits"))),
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut hits = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = data.images.select(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let mut ex = crate::nn::Executor::new(&model.graph, &model.params, Mode::Eval, rng);
        ex.feed_input(x)?;
        for (j, (e, w)) in model.exits.iter().zip(&weights).enumerate() {
            let logits = ex.eval(e.logits)?;
            let (l, _) = ce_from_logits(logits, &labels, 1.0);
            loss += w * l * chunk.len() as f64;
            if j + 1 == k {
                hits += logits
                    .argmax_rows()
                    .iter()
                    .zip(&labels)
                    .filter(|(p, l)| p == l)
                    .count();
            }
        }
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Trains `model` in place on `splits.train`, validating on `splits.val`
/// after every epoch.
pub fn train(model: &mut TocModel, splits: &Splits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let start = Instant::now();
    let weights = cfg.weights(model.num_exits())?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut val_rng = seeded_rng(cfg.seed ^ 0x5eed_0f_7a11);
    let mut bn_rng = seeded_rng(cfg.seed ^ 0xb4_7c_4e57);
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut gn_sum = 0.0;
        let batches = splits.train.batches(cfg.batch_size, &mut rng);
        let steps = batches.len();
        for (step, batch) in batches.into_iter().enumerate() {
            let mut x = splits.train.images.select(&batch);
            if cfg.augment_pad > 0 {
                x = cifar::augment(&x, cfg.augment_pad, &mut rng);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| splits.train.labels[i]).collect();
            let diverged = |trace: &TrainTrace| Error::Diverged {
                epoch,
                step,
                trace: Box::new(trace.clone()),
            };
            let pass = if cfg.shared_exit_noise { forward_shared_channel } else { forward };
            let acts = match pass(&model.graph, &model.params, &x, Mode::Train, &mut rng) {
                Ok(a) => a,
                Err(Error::NonFinite(_)) | Err(Error::ZeroPower { .. }) => return Err(diverged(&trace)),
                Err(e) => return Err(e),
            };
            let sl = step_loss(model, &acts, &labels, &weights, cfg.confidence_loss)?;
            if !sl.task.is_finite() {
                return Err(diverged(&trace));
            }
            let grads = backward(&model.graph, &model.params, &acts, sl.seeds)?;
            let gn = grads.norm_sq();
            if !gn.is_finite() {
                return Err(diverged(&trace));
            }
            sgd_step(&mut model.params, &grads, &mut opt)?;
            acts.apply_stat_updates(&mut model.params);
            trace.step_grad_norm_sq.push(gn);
            loss_sum += sl.task;
            gn_sum += gn;
        }
        if cfg.precise_bn_batches > 0 {
            recompute_bn_stats(model, &splits.train, cfg.batch_size, cfg.precise_bn_batches, &mut bn_rng)?;
        }
        let (val_loss, val_accuracy) = evaluate_loss(model, &splits.val, &weights, &mut val_rng)?;
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            val_loss,
            val_accuracy,
            grad_norm_sq: gn_sum / steps as f64,
            lr: opt.lr,
        });
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if every > 0 && (epoch + 1) % every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                checkpoint::save(&dir.join(format!("epoch{:04}.ckpt", epoch + 1)), &model.params)?;
            }
        }
    }
    trace.wall_time_s = start.elapsed().as_secs_f64();
    let profile = model.profile(crate::flops::Convention::AllLayers)?;
    Ok(TrainOutcome {
        trace,
        flops_min: profile.flops_min().unwrap_or(0),
        flops_max: profile.flops_max().unwrap_or(0),
    })
}

/// Replaces every batch-norm running mean and variance with the average of
/// the batch statistics over up to `max_batches` shuffled training batches.
pub fn recompute_bn_stats(
    model: &mut TocModel,
    data: &Dataset,
    batch_size: usize,
    max_batches: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut used = 0usize;
    for batch in data.batches(batch_size, rng).into_iter().take(max_batches) {
        if batch.len() < 2 {
            continue;
        }
        let x = data.images.select(&batch);
        let acts = forward(&model.graph, &model.params, &x, Mode::Train, rng)?;
        for (k, t) in acts.batch_stats() {
            let acc = sums.entry(k.clone()).or_insert_with(|| vec![0.0; t.len()]);
            acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        used += 1;
    }
    for (k, acc) in sums {
        if let Some(slot) = model.params.get_mut(&k) {
            for (r, a) in slot.data_mut().iter_mut().zip(&acc) {
                *r = a / used as f64;
            }
        }
    }
    Ok(())
}

/// Objective for the convergence diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyObjective {
    /// `f(w) = |w|^2 / 2` with gradient `w + noise`.
    NoisyQuadratic,
    /// `f(w) = sum |w_i|`, non-smooth at 0; runs but is flagged.
    NoisyAbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub objective: ToyObjective,
    pub dim: usize,
    pub noise_std: f64,
    /// Norm of the starting point.
    pub init_norm: f64,
    /// Step-size constant: `alpha = d / sqrt(T)`.
    pub d: f64,
    pub t_grid: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            objective: ToyObjective::NoisyQuadratic,
            dim: 10,
            noise_std: 1.0,
            init_norm: 1.0,
            d: 1.0,
            t_grid: vec![100, 1_000, 10_000],
            reps: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub t_grid: Vec<usize>,
    /// Monte Carlo estimate of `E |grad f(g_T)|^2` per T.
    pub mean_grad_sq: Vec<f64>,
    /// `sqrt(T)` times the above.
    pub scaled: Vec<f64>,
    /// Least-squares slope of `ln mean` against `ln T`.
    pub slope: f64,
    /// Largest scaled value: an estimate of the bound constant.
    pub d_hat: f64,
    /// Max over min of the scaled values.
    pub ratio: f64,
    pub smooth: bool,
}

fn toy_grad(obj: ToyObjective, w: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(w) {
        *o = match obj {
            ToyObjective::NoisyQuadratic => x,
            ToyObjective::NoisyAbs => x.signum(),
        };
    }
}

/// Runs SGD with step `d / sqrt(T)` for each T, returning the iterate at a
/// uniformly drawn step and averaging its squared true gradient norm over
/// `reps` independent runs.
pub fn convergence_diagnostic(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if cfg.reps == 0 || cfg.dim == 0 || cfg.t_grid.len() < 2 || cfg.t_grid.contains(&0) {
        return Err(Error::Config("diagnostic needs reps, dim >= 1 and at least two positive T".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut w0: Vec<f64> = (0..cfg.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = w0.iter().map(|v| v * v).sum::<f64>().sqrt();
    w0.iter_mut().for_each(|v| *v *= cfg.init_norm / norm);
    let mut mean_grad_sq = Vec::with_capacity(cfg.t_grid.len());
    let mut g = vec![0.0; cfg.dim];
    for &t_max in &cfg.t_grid {
        let alpha = cfg.d / (t_max as f64).sqrt();
        let mut acc = 0.0;
        for _ in 0..cfg.reps {
            let pick = rng.random_range(0..t_max);
            let mut w = w0.clone();
            for _ in 0..pick {
                toy_grad(cfg.objective, &w, &mut g);
                for (wi, gi) in w.iter_mut().zip(&g) {
                    let xi: f64 = rng.sample(StandardNormal);
                    *wi -= alpha * (gi + cfg.noise_std * xi);
                }
            }
            toy_grad(cfg.objective, &w, &mut g);
            acc += g.iter().map(|v| v * v).sum::<f64>();
        }
        mean_grad_sq.push(acc / cfg.reps as f64);
    }
    let scaled: Vec<f64> = cfg
        .t_grid
        .iter()
        .zip(&mean_grad_sq)
        .map(|(&t, m)| (t as f64).sqrt() * m)
        .collect();
    let xs: Vec<f64> = cfg.t_grid.iter().map(|&t| (t as f64).ln()).collect();
    let ys: Vec<f64> = mean_grad_sq.iter().map(|m| m.max(f64::MIN_POSITIVE).ln()).collect();
    let slope = fit_slope(&xs, &ys);
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ConvergenceReport {
        t_grid: cfg.t_grid.clone(),
        mean_grad_sq,
        scaled,
        slope,
        d_hat: max,
        ratio: max / min,
        smooth: cfg.objective == ToyObjective::NoisyQuadratic,
    })
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// First and last epoch mean squared gradient norms of a real training run.
pub fn describe_trace(trace: &TrainTrace) -> Option<(f64, f64)> {
    Some((trace.epochs.first()?.grad_norm_sq, trace.epochs.last()?.grad_norm_sq))
}
