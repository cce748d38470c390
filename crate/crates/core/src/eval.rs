//! Budgeted batch inference: calibrating exit thresholds on validation
//! confidences and routing a test batch through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ExitPass;
use crate::scheduler::{average_cost, calibrate_policy, histogram, select_exit, Calibration, ExitPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetedOutcome {
    pub accuracy: f64,
    /// Mean transmitter FLOPs per sample actually spent.
    pub avg_tx_flops: f64,
    pub histogram: Vec<usize>,
    /// 1-based exit of every sample.
    pub exits: Vec<usize>,
}

/// Calibrates a policy for a per-sample budget on validation confidences.
/// The total budget handed to the scheduler is `per_sample * N_val`.
pub fn calibrate(val: &ExitPass, costs: &[f64], per_sample: f64) -> Result<(ExitPolicy, Calibration)> {
    calibrate_policy(&val.confidences, costs, per_sample * val.confidences.len() as f64)
}

/// Routes every sample of `pass` to the first exit whose threshold its
/// confidence reaches and scores the receiver prediction from that exit.
pub fn budgeted_run(pass: &ExitPass, labels: &[usize], policy: &ExitPolicy) -> Result<BudgetedOutcome> {
    let n = pass.predictions.len();
    if n == 0 || n != labels.len() || pass.confidences.len() != n {
        return Err(Error::Config(format!(
            "budgeted run over {n} predictions, {} confidences and {} labels",
            pass.confidences.len(),
            labels.len()
        )));
    }
    let k = policy.num_exits();
    let mut exits = Vec::with_capacity(n);
    let mut hits = 0;
    for j in 0..n {
        if pass.confidences[j].len() != k || pass.predictions[j].len() != k {
            return Err(Error::Config(format!("sample {j} does not cover {k} exits")));
        }
        let e = select_exit(&pass.confidences[j], &policy.thresholds);
        if pass.predictions[j][e - 1] == labels[j] {
            hits += 1;
        }
        exits.push(e);
    }
    Ok(BudgetedOutcome {
        accuracy: hits as f64 / n as f64,
        avg_tx_flops: average_cost(&exits, &policy.costs),
        histogram: histogram(&exits, k),
        exits,
    })
}

/// Mean of `values` over the samples assigned to each exit; `None` for
/// exits nobody took.
pub fn mean_by_exit(exits: &[usize], values: &[f64], k: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&e, &v) in exits.iter().zip(values) {
        sum[e - 1] += v;
        count[e - 1] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pass() -> ExitPass {
        ExitPass {
            confidences: vec![vec![0.9, 0.9], vec![0.2, 0.8], vec![0.6, 0.7], vec![0.1, 0.3]],
            predictions: vec![vec![0, 0], vec![1, 1], vec![0, 2], vec![3, 3]],
        }
    }

    #[test]
    fn routes_by_threshold() {
        let p = pass();
        let labels = [0, 1, 2, 3];
        let (policy, cal) = calibrate(&p, &[1.0, 3.0], 2.0).unwrap();
        assert_eq!(cal.counts, vec![2, 2]);
        let out = budgeted_run(&p, &labels, &policy).unwrap();
        assert_eq!(out.exits, vec![1, 2, 1, 2]);
        assert_eq!(out.histogram, vec![2, 2]);
        assert_eq!(out.avg_tx_flops, 2.0);
        assert_eq!(out.accuracy, 0.75);
    }

    #[test]
    fn mismatched_labels_fail() {
        let policy = ExitPolicy::fixed_exit(&[1.0, 2.0], true);
        assert!(budgeted_run(&pass(), &[0, 1], &policy).is_err());
    }

    #[test]
    fn means_per_exit() {
        let m = mean_by_exit(&[1, 1, 3], &[0.2, 0.4, 1.0], 3);
        assert_eq!(m, vec![Some(0.30000000000000004), None, Some(1.0)]);
    }
}
