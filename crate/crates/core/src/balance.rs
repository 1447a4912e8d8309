//! Covariate balance diagnostics: standardized mean differences,
//! Kolmogorov–Smirnov distances, effective sample sizes and the rule that
//! picks a weighting algorithm from them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DesignMatrix, Estimand};
use crate::error::{Error, Result};
use crate::stats;
use crate::weights::{Algorithm, WeightSet};

/// Balance threshold on both the maximum SMD and the maximum KS.
pub const BALANCE_THRESHOLD: f64 = 0.1;
/// Algorithms whose maximum KS lies within this window of the best one are
/// considered tied and separated by ESS.
pub const KS_TIE_WINDOW: f64 = 0.005;
pub const UNWEIGHTED: &str = "Unweighted";

fn group_totals(treated: &[bool], w: &[f64]) -> (f64, f64) {
    let (mut s0, mut s1) = (0.0, 0.0);
    for (&t, &wi) in treated.iter().zip(w) {
        if t {
            s1 += wi;
        } else {
            s0 += wi;
        }
    }
    (s0, s1)
}

fn check_inputs(x: &[f64], treated: &[bool], w: &[f64]) -> Result<(f64, f64)> {
    if x.len() != treated.len() || w.len() != treated.len() {
        return Err(Error::InvalidInput("balance inputs disagree in length".into()));
    }
    let (s0, s1) = group_totals(treated, w);
    if !(s0 > 0.0) {
        return Err(Error::EmptyGroup("control"));
    }
    if !(s1 > 0.0) {
        return Err(Error::EmptyGroup("treatment"));
    }
    Ok((s0, s1))
}

/// Unweighted scale used to standardize mean differences: the pooled sd
/// `√((s₁² + s₀²)/2)` for ATE and the treated-group sd otherwise.
pub fn reference_sd(x: &[f64], treated: &[bool], estimand: Estimand) -> f64 {
    let x1: Vec<f64> = x.iter().zip(treated).filter(|(_, &t)| t).map(|(&v, _)| v).collect();
    let x0: Vec<f64> = x.iter().zip(treated).filter(|(_, &t)| !t).map(|(&v, _)| v).collect();
    let v1 = if x1.len() > 1 { stats::variance(&x1) } else { 0.0 };
    let v0 = if x0.len() > 1 { stats::variance(&x0) } else { 0.0 };
    match estimand.weighting() {
        Estimand::Ate => ((v1 + v0) / 2.0).sqrt(),
        _ => v1.sqrt(),
    }
}

fn weighted_group_means(x: &[f64], treated: &[bool], w: &[f64], totals: (f64, f64)) -> (f64, f64) {
    let (mut m0, mut m1) = (0.0, 0.0);
    for i in 0..x.len() {
        if treated[i] {
            m1 += w[i] * x[i];
        } else {
            m0 += w[i] * x[i];
        }
    }
    (m0 / totals.0, m1 / totals.1)
}

fn standardize(diff: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        diff / sd
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Weighted treated-minus-control mean difference over the unweighted
/// reference sd. A zero reference sd gives 0 for equal means and ±∞
/// otherwise.
pub fn signed_smd(x: &[f64], treated: &[bool], w: &[f64], estimand: Estimand) -> Result<f64> {
    let totals = check_inputs(x, treated, w)?;
    let (m0, m1) = weighted_group_means(x, treated, w, totals);
    Ok(standardize(m1 - m0, reference_sd(x, treated, estimand)))
}

pub fn weighted_smd(x: &[f64], treated: &[bool], w: &[f64], estimand: Estimand) -> Result<f64> {
    signed_smd(x, treated, w, estimand).map(f64::abs)
}

fn sort_order(x: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    order
}

/// KS distance with rows pre-sorted by `x`.
fn ks_sorted(order: &[usize], x: &[f64], treated: &[bool], w: &[f64], totals: (f64, f64)) -> f64 {
    let (mut c0, mut c1) = (0.0, 0.0);
    let mut best: f64 = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if treated[i] {
            c1 += w[i];
        } else {
            c0 += w[i];
        }
        let block_end = order.get(pos + 1).is_none_or(|&next| x[next] != x[i]);
        if block_end {
            best = best.max((c1 / totals.1 - c0 / totals.0).abs());
        }
    }
    best.min(1.0)
}

/// Largest gap between the two groups' weighted empirical CDFs, each
/// normalized within its group, over all observed values.
pub fn weighted_ks(x: &[f64], treated: &[bool], w: &[f64]) -> Result<f64> {
    let totals = check_inputs(x, treated, w)?;
    Ok(ks_sorted(&sort_order(x), x, treated, w, totals))
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Percentage rendered as an integer with a `%` suffix.
pub fn format_percent(percent: f64) -> String {
    format!("{}%", percent.round() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub total: f64,
    /// `100 · total / n`, unrounded.
    pub percent: f64,
    /// Control, treated (reported orientation).
    pub per_group: (f64, f64),
}

impl EssSummary {
    /// `w` and `treated` must be in the same orientation; `flipped` swaps the
    /// per-group pair back to control/treated as reported.
    pub fn new(w: &[f64], treated: &[bool], flipped: bool) -> Self {
        let w0: Vec<f64> = w.iter().zip(treated).filter(|(_, &t)| !t).map(|(&v, _)| v).collect();
        let w1: Vec<f64> = w.iter().zip(treated).filter(|(_, &t)| t).map(|(&v, _)| v).collect();
        let (e0, e1) = (ess(&w0), ess(&w1));
        let total = e0 + e1;
        Self {
            total,
            percent: 100.0 * total / w.len() as f64,
            per_group: if flipped { (e1, e0) } else { (e0, e1) },
        }
    }

    pub fn percent_label(&self) -> String {
        format_percent(self.percent)
    }
}

/// Reusable balance evaluator over a fixed design: sort orders and reference
/// sds are computed once.
#[derive(Debug, Clone)]
pub struct BalanceEvaluator<'a> {
    dm: &'a DesignMatrix,
    columns: Vec<Vec<f64>>,
    orders: Vec<Vec<usize>>,
    ref_sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnBalance {
    pub smd: Vec<f64>,
    pub ks: Vec<f64>,
}

impl ColumnBalance {
    pub fn mean_smd(&self) -> f64 {
        stats::mean(&self.smd)
    }

    pub fn max_smd(&self) -> f64 {
        self.smd.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_ks(&self) -> f64 {
        stats::mean(&self.ks)
    }

    pub fn max_ks(&self) -> f64 {
        self.ks.iter().copied().fold(0.0, f64::max)
    }
}

impl<'a> BalanceEvaluator<'a> {
    pub fn new(dm: &'a DesignMatrix) -> Self {
        let columns: Vec<Vec<f64>> = (0..dm.p()).map(|j| dm.column_values(j)).collect();
        let orders = columns.iter().map(|c| sort_order(c)).collect();
        let ref_sd = columns
            .iter()
            .map(|c| reference_sd(c, dm.treated(), dm.weighting_estimand()))
            .collect();
        Self {
            dm,
            columns,
            orders,
            ref_sd,
        }
    }

    /// Absolute SMD and KS of every design column under `w`.
    pub fn evaluate(&self, w: &[f64]) -> Result<ColumnBalance> {
        let treated = self.dm.treated();
        if w.len() != treated.len() {
            return Err(Error::InvalidInput("weight vector length mismatch".into()));
        }
        let totals = group_totals(treated, w);
        if !(totals.0 > 0.0) {
            return Err(Error::EmptyGroup("control"));
        }
        if !(totals.1 > 0.0) {
            return Err(Error::EmptyGroup("treatment"));
        }
        let mut smd = Vec::with_capacity(self.columns.len());
        let mut ks = Vec::with_capacity(self.columns.len());
        for (j, x) in self.columns.iter().enumerate() {
            let (m0, m1) = weighted_group_means(x, treated, w, totals);
            smd.push(standardize(m1 - m0, self.ref_sd[j]).abs());
            ks.push(ks_sorted(&self.orders[j], x, treated, w, totals));
        }
        Ok(ColumnBalance { smd, ks })
    }
}

/// Per-algorithm summary row feeding the recommendation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub max_smd: f64,
    pub max_ks: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub algorithm: Algorithm,
    pub balanced: bool,
    pub rationale: String,
}

/// Picks the algorithm with the smallest maximum KS among those whose
/// maximum SMD and maximum KS are both below the threshold. Candidates within
/// [`KS_TIE_WINDOW`] of the best are ranked by ESS; remaining ties go to the
/// earlier entry.
pub fn recommend(rows: &[AlgorithmSummary]) -> Option<Recommendation> {
    let balanced: Vec<&AlgorithmSummary> = rows
        .iter()
        .filter(|r| r.max_ks < BALANCE_THRESHOLD && r.max_smd < BALANCE_THRESHOLD)
        .collect();
    if balanced.is_empty() {
        let best = rows.iter().fold(None::<&AlgorithmSummary>, |acc, r| match acc {
            Some(a) if a.max_ks <= r.max_ks => Some(a),
            _ if r.max_ks.is_nan() => acc,
            _ => Some(r),
        })?;
        return Some(Recommendation {
            algorithm: best.algorithm,
            balanced: false,
            rationale: format!(
                "No algorithm achieved balance (maximum SMD and maximum KS both below {BALANCE_THRESHOLD}). \
                 {} has the smallest maximum KS ({:.3}); interpret the effect with caution.",
                best.algorithm, best.max_ks
            ),
        });
    }
    let best_ks = balanced.iter().map(|r| r.max_ks).fold(f64::INFINITY, f64::min);
    let tied: Vec<&&AlgorithmSummary> = balanced
        .iter()
        .filter(|r| r.max_ks <= best_ks + KS_TIE_WINDOW)
        .collect();
    let chosen = tied
        .iter()
        .fold(None::<&AlgorithmSummary>, |acc, r| match acc {
            Some(a) if a.ess >= r.ess => Some(a),
            _ => Some(r),
        })
        .expect("at least one tied candidate");
    let rationale = if tied.len() == 1 {
        format!(
            "{} achieves balance (maximum SMD {:.3}, maximum KS {:.3}) with the smallest maximum KS.",
            chosen.algorithm, chosen.max_smd, chosen.max_ks
        )
    } else {
        let others: Vec<&str> = tied
            .iter()
            .filter(|r| r.algorithm != chosen.algorithm)
            .map(|r| r.algorithm.id())
            .collect();
        format!(
            "{} achieves balance (maximum SMD {:.3}, maximum KS {:.3}); it ties on maximum KS with {} \
             and retains the largest effective sample size ({:.0}).",
            chosen.algorithm,
            chosen.max_smd,
            chosen.max_ks,
            others.join(", "),
            chosen.ess
        )
    };
    Some(Recommendation {
        algorithm: chosen.algorithm,
        balanced: true,
        rationale,
    })
}

/// Balance tables for the unweighted sample and every algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub estimand: Estimand,
    pub n: usize,
    /// Row labels: encoded confounder columns in design order.
    pub confounders: Vec<String>,
    /// Column labels: `Unweighted` followed by algorithm ids.
    pub columns: Vec<String>,
    /// `smd[row][column]`.
    pub smd: Vec<Vec<f64>>,
    pub ks: Vec<Vec<f64>>,
    pub mean_smd: Vec<f64>,
    pub max_smd: Vec<f64>,
    pub mean_ks: Vec<f64>,
    pub max_ks: Vec<f64>,
    pub ess: Vec<EssSummary>,
    pub recommended: Option<Algorithm>,
    pub rationale: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl BalanceReport {
    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == label)
    }

    pub fn summaries(&self) -> Vec<AlgorithmSummary> {
        self.columns
            .iter()
            .enumerate()
            .filter_map(|(k, label)| {
                let algorithm = label.parse::<Algorithm>().ok()?;
                Some(AlgorithmSummary {
                    algorithm,
                    max_smd: self.max_smd[k],
                    max_ks: self.max_ks[k],
                    ess: self.ess[k].total,
                })
            })
            .collect()
    }
}

/// Builds the SMD, KS and ESS tables and the recommendation.
pub fn build_balance_report(dm: &DesignMatrix, weight_sets: &[WeightSet]) -> Result<BalanceReport> {
    let evaluator = BalanceEvaluator::new(dm);
    let uniform = vec![1.0; dm.n()];
    let mut labels = vec![UNWEIGHTED.to_string()];
    labels.extend(weight_sets.iter().map(|ws| ws.algorithm.id().to_string()));
    let all_weights: Vec<&[f64]> = std::iter::once(uniform.as_slice())
        .chain(weight_sets.iter().map(|ws| ws.w.as_slice()))
        .collect();
    let evaluated: Vec<ColumnBalance> = all_weights
        .par_iter()
        .map(|w| evaluator.evaluate(w))
        .collect::<Result<_>>()?;

    let p = dm.p();
    let smd = (0..p).map(|j| evaluated.iter().map(|c| c.smd[j]).collect()).collect();
    let ks = (0..p).map(|j| evaluated.iter().map(|c| c.ks[j]).collect()).collect();
    let ess: Vec<EssSummary> = all_weights
        .iter()
        .map(|w| EssSummary::new(w, dm.treated(), dm.is_flipped()))
        .collect();

    let mut warnings = Vec::new();
    for (k, c) in evaluated.iter().enumerate() {
        for (j, v) in c.smd.iter().enumerate() {
            if v.is_infinite() {
                warnings.push(format!(
                    "{}: SMD of `{}` is unbounded (reference sd is zero but means differ)",
                    labels[k],
                    dm.columns()[j].name
                ));
            }
        }
    }
    for ws in weight_sets {
        for w in &ws.diagnostics.warnings {
            warnings.push(format!("{}: {w}", ws.algorithm));
        }
    }

    let mut report = BalanceReport {
        estimand: dm.estimand(),
        n: dm.n(),
        confounders: dm.column_names().iter().map(|s| s.to_string()).collect(),
        columns: labels,
        smd,
        ks,
        mean_smd: evaluated.iter().map(ColumnBalance::mean_smd).collect(),
        max_smd: evaluated.iter().map(ColumnBalance::max_smd).collect(),
        mean_ks: evaluated.iter().map(ColumnBalance::mean_ks).collect(),
        max_ks: evaluated.iter().map(ColumnBalance::max_ks).collect(),
        ess,
        recommended: None,
        rationale: String::new(),
        warnings,
    };
    match recommend(&report.summaries()) {
        Some(rec) => {
            report.recommended = Some(rec.algorithm);
            report.rationale = rec.rationale;
        }
        None => report.rationale = "No weighting algorithm was computed.".into(),
    }
    Ok(report)
}
