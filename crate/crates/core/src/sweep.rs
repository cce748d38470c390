//! Channel x seed x budget sweeps. Every (channel, seed) cell trains its own
//! model with its own rng streams, so cells run in parallel and the report
//! does not depend on scheduling.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::Splits;
use crate::dynamic::build_dynamic;
use crate::error::{Error, Result};
use crate::eval::{budgeted_run, calibrate};
use crate::flops::{Convention, FlopsProfile};
use crate::link::{ChannelKind, ChannelSpec, TX_DIM};
use crate::nn::checkpoint;
use crate::pipeline::{accuracy, ModelKind, TocModel};
use crate::report::{self, ReportRow, RowStatus};
use crate::scheduler::ExitPolicy;
use crate::static_model::build_static;
use crate::trainer::{train, TrainConfig, TrainTrace};
use crate::{seeded_rng, SeededRng};

/// Derives an independent stream seed for a cell.
pub fn stream_seed(seed: u64, channel: usize, purpose: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((channel as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(purpose.wrapping_mul(0x94d0_49bb_1331_11eb));
    z ^= z >> 31;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 29)
}

/// Builds an untrained model for `channel`.
pub fn build_model(cfg: &ExperimentConfig, channel: ChannelSpec, rng: &mut SeededRng) -> Result<TocModel> {
    match cfg.model {
        ModelKind::Static => build_static(&cfg.static_config(channel), rng),
        ModelKind::Dynamic => Ok(build_dynamic(&cfg.dynamic_config(channel), rng)?.0),
    }
}

/// Budgets for a test batch of `n` samples.
pub fn budget_grid(cfg: &ExperimentConfig, costs: &[f64], n: usize) -> Vec<f64> {
    if !cfg.sweep.budgets.is_empty() {
        return cfg.sweep.budgets.clone();
    }
    let p = cfg.sweep.budget_points;
    let (lo, hi) = (n as f64 * costs[0], n as f64 * costs[costs.len() - 1]);
    match p {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..p).map(|i| lo + (hi - lo) * i as f64 / (p - 1) as f64).collect(),
    }
}

/// Outcome of one budget in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetCell {
    pub budget: f64,
    pub policy: Option<ExitPolicy>,
    /// 1-based exit of every test sample; empty when infeasible.
    pub exits: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub channel: ChannelSpec,
    pub seed: u64,
    pub model: TocModel,
    pub trace: TrainTrace,
    pub rows: Vec<ReportRow>,
    pub budgets: Vec<BudgetCell>,
    /// Per-sample pixel-noise level of the test split.
    pub test_noise: Vec<f64>,
}

fn row_base(model: &TocModel, channel: ChannelSpec, seed: u64) -> ReportRow {
    ReportRow {
        model: model.name.clone(),
        channel: channel.kind.as_str().to_string(),
        psnr_db: (channel.kind != ChannelKind::Noiseless).then_some(channel.psnr_db),
        budget: None,
        seed,
        status: RowStatus::Ok,
        accuracy: None,
        avg_tx_flops: None,
        exit_hist: Vec::new(),
        tx_dim: TX_DIM,
    }
}

/// Trains one model for `channel` and `seed` on `splits`.
pub fn train_cell(cfg: &ExperimentConfig, channel: ChannelSpec, index: usize, seed: u64, splits: &Splits) -> Result<(TocModel, TrainTrace)> {
    let mut init = seeded_rng(stream_seed(seed, index, 1));
    let mut model = build_model(cfg, channel, &mut init)?;
    let tc = TrainConfig {
        seed: stream_seed(seed, index, 2),
        ..cfg.train.clone()
    };
    let out = train(&mut model, splits, &tc)?;
    Ok((model, out.trace))
}

/// Scores a trained model on the test split: one fixed last-exit row, then
/// for dynamic models one row per budget.
pub fn score_cell(cfg: &ExperimentConfig, model: &TocModel, index: usize, seed: u64, splits: &Splits) -> Result<(Vec<ReportRow>, Vec<BudgetCell>)> {
    let channel = model
        .channel()
        .ok_or_else(|| Error::Config("model has no channel node".into()))?;
    let mut eval_rng = seeded_rng(stream_seed(seed, index, 3));
    let costs = model.costs(cfg.sweep.convention)?;
    let k = model.num_exits();
    let test = model.exit_pass(&splits.test.images, &mut eval_rng)?;
    let n = splits.test.len();
    let last: Vec<usize> = test.predictions.iter().map(|p| p[k - 1]).collect();
    let mut hist = vec![0; k];
    hist[k - 1] = n;
    let mut rows = vec![ReportRow {
        accuracy: Some(accuracy(&last, &splits.test.labels)?),
        avg_tx_flops: Some(costs[k - 1]),
        exit_hist: hist,
        ..row_base(model, channel, seed)
    }];
    let mut cells = Vec::new();
    if model.kind == ModelKind::Dynamic {
        let val = model.exit_pass(&splits.val.images, &mut eval_rng)?;
        for budget in budget_grid(cfg, &costs, n) {
            let base = ReportRow {
                budget: Some(budget),
                ..row_base(model, channel, seed)
            };
            match calibrate(&val, &costs, budget / n as f64) {
                Ok((policy, _)) => {
                    let out = budgeted_run(&test, &splits.test.labels, &policy)?;
                    rows.push(ReportRow {
                        accuracy: Some(out.accuracy),
                        avg_tx_flops: Some(out.avg_tx_flops),
                        exit_hist: out.histogram,
                        ..base
                    });
                    cells.push(BudgetCell {
                        budget,
                        policy: Some(policy),
                        exits: out.exits,
                    });
                }
                Err(Error::InfeasibleBudget { .. }) => {
                    rows.push(ReportRow {
                        status: RowStatus::Infeasible,
                        ..base
                    });
                    cells.push(BudgetCell {
                        budget,
                        policy: None,
                        exits: Vec::new(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((rows, cells))
}

fn run_cell(cfg: &ExperimentConfig, channel: ChannelSpec, index: usize, seed: u64) -> Result<CellResult> {
    let splits = cfg.dataset.load(seed)?;
    let (model, trace) = train_cell(cfg, channel, index, seed, &splits)?;
    let (rows, budgets) = score_cell(cfg, &model, index, seed, &splits)?;
    Ok(CellResult {
        channel,
        seed,
        model,
        trace,
        rows,
        budgets,
        test_noise: splits.test.noise,
    })
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<ReportRow>,
    pub cells: Vec<CellResult>,
}

/// Runs every (channel, seed) cell on a pool of `sweep.workers` threads.
/// Results keep grid order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let jobs: Vec<(usize, ChannelSpec, u64)> = cfg
        .channel
        .grid()
        .into_iter()
        .enumerate()
        .flat_map(|(i, c)| cfg.sweep.seeds.iter().map(move |&s| (i, c, s)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::Config("sweep has no channel or seed".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let cells = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, c, s)| run_cell(cfg, c, i, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = cells.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    Ok(SweepResult { rows, cells })
}

#[derive(Debug, Clone, Serialize)]
struct FlopsReport<'a> {
    model: &'a str,
    exits: usize,
    all_layers: &'a FlopsProfile,
    conv_linear: &'a FlopsProfile,
}

/// `flops.json` content for `model` under both counting conventions.
pub fn flops_json(model: &TocModel) -> Result<String> {
    let all = model.profile(Convention::AllLayers)?;
    let conv = model.profile(Convention::ConvLinear)?;
    let r = FlopsReport {
        model: &model.name,
        exits: model.num_exits(),
        all_layers: &all,
        conv_linear: &conv,
    };
    Ok(serde_json::to_string_pretty(&r)? + "\n")
}

fn cell_tag(c: &CellResult) -> String {
    let ch = match c.channel.kind {
        ChannelKind::Noiseless => "noiseless".to_string(),
        k => format!("{}_{}dB", k.as_str(), c.channel.psnr_db),
    };
    format!("{ch}_seed{}", c.seed)
}

/// Writes the report, curves, flops profile, and per-cell traces, loss
/// curves, checkpoints and exit policies under `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, result: &SweepResult, dir: &Path) -> Result<()> {
    report::emit_report(&result.rows, dir)?;
    report::emit_curves(&result.rows, dir)?;
    report::write_text(&dir.join("config.json"), &(cfg.to_json()? + "\n"))?;
    if let Some(first) = result.cells.first() {
        report::write_text(&dir.join("flops.json"), &flops_json(&first.model)?)?;
    }
    for c in &result.cells {
        let tag = cell_tag(c);
        let cell_dir = dir.join("cells");
        report::write_text(&cell_dir.join(format!("trace_{tag}.csv")), &c.trace.to_csv())?;
        let pts: Vec<(f64, f64)> = c.trace.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect();
        report::write_text(&cell_dir.join(format!("curve_loss_{tag}.csv")), &report::curve_csv("epoch", "loss", &pts))?;
        checkpoint::save(&cell_dir.join(format!("model_{tag}.ckpt")), &c.model.params)?;
        for (i, b) in c.budgets.iter().enumerate() {
            if let Some(p) = &b.policy {
                report::write_text(
                    &cell_dir.join(format!("policy_{tag}_b{i}.json")),
                    &(serde_json::to_string_pretty(p)? + "\n"),
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(0, 0, 1);
        assert_ne!(a, stream_seed(0, 0, 2));
        assert_ne!(a, stream_seed(1, 0, 1));
        assert_ne!(a, stream_seed(0, 1, 1));
        assert_eq!(a, stream_seed(0, 0, 1));
    }

    #[test]
    fn budget_grid_spans_costs() {
        let mut cfg = ExperimentConfig::preset("synthetic-dynamic").unwrap();
        cfg.sweep.budget_points = 3;
        assert_eq!(budget_grid(&cfg, &[1.0, 2.0, 5.0], 10), vec![10.0, 30.0, 50.0]);
        cfg.sweep.budgets = vec![7.0];
        assert_eq!(budget_grid(&cfg, &[1.0, 5.0], 10), vec![7.0]);
        cfg.sweep.budgets.clear();
        cfg.sweep.budget_points = 0;
        assert!(budget_grid(&cfg, &[1.0, 5.0], 10).is_empty());
    }
}
