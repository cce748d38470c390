//! Budgeted batch classification: exit probabilities, expected cost,
//! budget-to-rate inversion, threshold calibration and the exit rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bisection domain for the rate parameter.
pub const R_MIN: f64 = 1e-6;
pub const R_MAX: f64 = 1e6;
/// Below this distance from 1 the closed form switches to its limit.
pub const UNIT_RATE_TOL: f64 = 1e-9;

fn check_rate(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("rate r must be finite and > 0, got {r}")))
    }
}

/// `Pr_k = r^k / sum_j r^j` for `k = 1..=K`, evaluated in log space.
pub fn exit_probs(r: f64, k: usize) -> Result<Vec<f64>> {
    check_rate(r)?;
    if k == 0 {
        return Err(Error::Config("need at least one exit".into()));
    }
    let lr = r.ln();
    let logs: Vec<f64> = (1..=k).map(|j| j as f64 * lr).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Expected cost when exit k costs `k * quantum`, in closed form.
pub fn expected_cost_uniform(r: f64, k: usize, quantum: f64) -> Result<f64> {
    check_rate(r)?;
    if !(quantum > 0.0) {
        return Err(Error::Config(format!("FLOPs quantum must be > 0, got {quantum}")));
    }
    let kf = k as f64;
    if (r - 1.0).abs() <= UNIT_RATE_TOL {
        return Ok(quantum * (kf + 1.0) / 2.0);
    }
    let ki = k as i32;
    if r < 1.0 {
        let num = 1.0 - (kf + 1.0) * r.powi(ki) + kf * r.powi(ki + 1);
        Ok(quantum * num / ((1.0 - r) * (1.0 - r.powi(ki))))
    } else {
        // Same expression after dividing through by r^(K+1).
        let s = 1.0 / r;
        let num = s.powi(ki + 1) - (kf + 1.0) * s + kf;
        Ok(quantum * num / ((s - 1.0) * (s.powi(ki) - 1.0)))
    }
}

/// Checks that `costs` is a valid cost vector: non-empty, positive, strictly increasing.
pub fn check_costs(costs: &[f64]) -> Result<()> {
    if costs.is_empty() {
        return Err(Error::Config("cost vector is empty".into()));
    }
    if !(costs[0] > 0.0) || costs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(format!("costs must be positive and strictly increasing, got {costs:?}")));
    }
    Ok(())
}

/// `R(r) = sum_k C_k Pr_k(r)`.
pub fn expected_cost(r: f64, costs: &[f64]) -> Result<f64> {
    let probs = exit_probs(r, costs.len())?;
    Ok(probs.iter().zip(costs).map(|(p, c)| p * c).sum())
}

/// Largest rate whose expected batch cost stays within `budget`.
///
/// Bisects on `ln r`. Budgets at or above `batch * C_K` saturate at [`R_MAX`].
/// Budgets close to `batch * C_1` can require rates below [`R_MIN`]; the lower
/// bound is then pushed down (to 1e-300 at most) so the returned rate still
/// meets the budget to within the stated gap.
pub fn solve_rate(budget: f64, batch: usize, costs: &[f64]) -> Result<f64> {
    check_costs(costs)?;
    if !(budget > 0.0) || batch == 0 {
        return Err(Error::Config(format!("budget and batch must be > 0, got {budget} and {batch}")));
    }
    let target = budget / batch as f64;
    let (c1, ck) = (costs[0], costs[costs.len() - 1]);
    if target < c1 {
        return Err(Error::InfeasibleBudget {
            per_sample: target,
            min_cost: c1,
        });
    }
    if target >= ck {
        return Ok(R_MAX);
    }
    let r_at = |lr: f64| expected_cost(lr.exp(), costs);
    let mut lo = R_MIN.ln();
    while r_at(lo)? > target && lo > -690.0 {
        lo = (lo - 6.0 * std::f64::consts::LN_10).max(-690.0);
    }
    let mut hi = R_MAX.ln();
    while r_at(hi)? <= target && hi < 690.0 {
        hi = (hi + 6.0 * std::f64::consts::LN_10).min(690.0);
    }
    if r_at(lo)? > target {
        // Only reachable when target sits within rounding of C_1.
        return Ok(lo.exp());
    }
    let tol = 1e-13 * target;
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if r_at(mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if target - r_at(lo)? <= tol || hi - lo < 1e-15 {
            break;
        }
    }
    Ok(lo.exp())
}

/// Cumulative per-exit counts for `n` samples, rounded up so earlier exits
/// never receive fewer samples than their share; the last entry is `n`.
pub fn cumulative_targets(n: usize, probs: &[f64]) -> Vec<usize> {
    let mut cum = 0.0;
    let mut prev = 0;
    let k = probs.len();
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            cum += p;
            let t = if i + 1 == k {
                n
            } else {
                ((n as f64 * cum - 1e-9).ceil().max(0.0) as usize).clamp(prev, n)
            };
            prev = t;
            t
        })
        .collect()
}

/// Per-exit counts from cumulative targets.
pub fn exit_counts(n: usize, probs: &[f64]) -> Vec<usize> {
    let cum = cumulative_targets(n, probs);
    let mut prev = 0;
    cum.iter()
        .map(|&c| {
            let d = c - prev;
            prev = c;
            d
        })
        .collect()
}

/// Thresholds and the resulting assignment on the calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// `theta_k`; `+inf` when no sample exits at k, `-inf` for the last exit.
    pub thresholds: Vec<f64>,
    pub counts: Vec<usize>,
    /// 1-based exit per sample.
    pub assignment: Vec<usize>,
}

/// Sequential calibration from per-exit counts.
///
/// `confidences[j][k]` is sample j's confidence at exit k+1; only the first
/// `K - 1` columns are read. At each exit the highest-confidence remaining
/// samples leave, ties broken by ascending sample index.
pub fn calibrate_counts(confidences: &[Vec<f64>], counts: &[usize]) -> Result<Calibration> {
    let n = confidences.len();
    if n == 0 {
        return Err(Error::Config("empty validation set".into()));
    }
    let k = counts.len();
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Config(format!("exit counts {counts:?} do not sum to {n}")));
    }
    if let Some(j) = confidences.iter().position(|row| row.len() + 1 < k) {
        return Err(Error::Config(format!("sample {j} lacks confidences for {} exits", k - 1)));
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut assignment = vec![k; n];
    let mut thresholds = Vec::with_capacity(k);
    for (exit, &m) in counts.iter().enumerate().take(k - 1) {
        if m == 0 {
            thresholds.push(f64::INFINITY);
            continue;
        }
        remaining.sort_by(|&a, &b| {
            confidences[b][exit]
                .total_cmp(&confidences[a][exit])
                .then(a.cmp(&b))
        });
        let taken: Vec<usize> = remaining.drain(..m).collect();
        thresholds.push(taken.iter().map(|&j| confidences[j][exit]).fold(f64::INFINITY, f64::min));
        for j in taken {
            assignment[j] = exit + 1;
        }
    }
    thresholds.push(f64::NEG_INFINITY);
    Ok(Calibration {
        thresholds,
        counts: counts.to_vec(),
        assignment,
    })
}

/// Calibrates thresholds so exit shares follow `probs` on the validation set.
pub fn calibrate_thresholds(confidences: &[Vec<f64>], probs: &[f64]) -> Result<Calibration> {
    if confidences.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    calibrate_counts(confidences, &exit_counts(confidences.len(), probs))
}

/// Exit counts for `n` samples under rate `r`, adjusted so the batch cost never
/// exceeds `budget` even where the rate was found only to within tolerance.
pub fn budget_counts(n: usize, r: f64, costs: &[f64], budget: f64) -> Result<Vec<usize>> {
    let mut counts = exit_counts(n, &exit_probs(r, costs.len())?);
    let cost = |c: &[usize]| c.iter().zip(costs).map(|(&n, &c)| n as f64 * c).sum::<f64>();
    while cost(&counts) > budget {
        let Some(k) = (1..counts.len()).rev().find(|&k| counts[k] > 0) else {
            return Err(Error::InfeasibleBudget {
                per_sample: budget / n as f64,
                min_cost: costs[0],
            });
        };
        counts[k] -= 1;
        counts[k - 1] += 1;
    }
    Ok(counts)
}

/// First exit whose confidence clears its threshold; the last exit accepts all.
pub fn select_exit(confidences: &[f64], thresholds: &[f64]) -> usize {
    let k = thresholds.len();
    for (i, t) in thresholds.iter().enumerate().take(k - 1) {
        if confidences[i] >= *t {
            return i + 1;
        }
    }
    k
}

pub fn histogram(exits: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &e in exits {
        h[e - 1] += 1;
    }
    h
}

/// Average transmitter cost of a per-sample exit assignment.
pub fn average_cost(exits: &[usize], costs: &[f64]) -> f64 {
    exits.iter().map(|&e| costs[e - 1]).sum::<f64>() / exits.len() as f64
}

mod non_finite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<Repr> = v
            .iter()
            .map(|&x| {
                if x.is_finite() {
                    Repr::Num(x)
                } else if x > 0.0 {
                    Repr::Text("inf".into())
                } else {
                    Repr::Text("-inf".into())
                }
            })
            .collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let reprs = Vec::<Repr>::deserialize(d)?;
        reprs
            .into_iter()
            .map(|r| match r {
                Repr::Num(x) => Ok(x),
                Repr::Text(t) => match t.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(serde::de::Error::custom(format!("bad threshold `{other}`"))),
                },
            })
            .collect()
    }
}

/// A calibrated exit policy, as written to policy files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub r: f64,
    pub probs: Vec<f64>,
    #[serde(with = "non_finite")]
    pub thresholds: Vec<f64>,
    pub costs: Vec<f64>,
    pub budget: f64,
    pub batch: usize,
}

impl ExitPolicy {
    pub fn num_exits(&self) -> usize {
        self.thresholds.len()
    }

    /// Thresholds that send every sample to exit 1 (`first`) or exit K.
    pub fn fixed_exit(costs: &[f64], first: bool) -> Self {
        let k = costs.len();
        let mut thresholds = vec![if first { f64::NEG_INFINITY } else { f64::INFINITY }; k];
        thresholds[k - 1] = f64::NEG_INFINITY;
        Self {
            r: if first { R_MIN } else { R_MAX },
            probs: exit_probs(if first { R_MIN } else { R_MAX }, k).expect("valid clamp"),
            thresholds,
            costs: costs.to_vec(),
            budget: 0.0,
            batch: 0,
        }
    }
}

/// Solves for the rate, then calibrates thresholds on the validation
/// confidences. `batch` is the number of validation samples.
pub fn calibrate_policy(confidences: &[Vec<f64>], costs: &[f64], budget: f64) -> Result<(ExitPolicy, Calibration)> {
    let n = confidences.len();
    if n == 0 {
        return Err(Error::Config("empty validation set".into()));
    }
    let r = solve_rate(budget, n, costs)?;
    let counts = budget_counts(n, r, costs, budget)?;
    let cal = calibrate_counts(confidences, &counts)?;
    let policy = ExitPolicy {
        r,
        probs: exit_probs(r, costs.len())?,
        thresholds: cal.thresholds.clone(),
        costs: costs.to_vec(),
        budget,
        batch: n,
    };
    Ok((policy, cal))
}
