//! Gradient-boosted regression trees for the propensity score, with the
//! number of trees chosen by a balance criterion rather than by prediction
//! error.

use serde::{Deserialize, Serialize};

use super::{ps_to_weights, Algorithm, Diagnostics, PropensityFit, PropensityVector};
use crate::balance::BalanceEvaluator;
use crate::data::{DesignMatrix, Estimand};
use crate::error::{Error, Result};
use crate::stats::{self, expit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmParams {
    pub max_trees: usize,
    pub shrinkage: f64,
    /// Maximum tree depth.
    pub depth: usize,
    /// Balance is evaluated every `eval_stride` trees.
    pub eval_stride: usize,
    pub min_leaf: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self {
            max_trees: 5000,
            shrinkage: 0.01,
            depth: 3,
            eval_stride: 25,
            min_leaf: 10,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::InvalidInput("GBM shrinkage must lie in (0, 1]".into()));
        }
        if self.eval_stride == 0 || self.depth == 0 || self.min_leaf == 0 {
            return Err(Error::InvalidInput(
                "GBM depth, eval_stride and min_leaf must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Balance criterion used to pick the number of trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopRule {
    /// Mean absolute standardized mean difference.
    MeanSmd,
    /// Maximum Kolmogorov–Smirnov distance.
    MaxKs,
}

impl StopRule {
    pub fn algorithm(self) -> Algorithm {
        match self {
            StopRule::MeanSmd => Algorithm::GbmEs,
            StopRule::MaxKs => Algorithm::GbmKs,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    sum: f64,
    count: usize,
    last: f64,
}

struct Booster<'a> {
    columns: Vec<Vec<f64>>,
    orders: Vec<Vec<usize>>,
    params: &'a GbmParams,
}

impl<'a> Booster<'a> {
    fn new(dm: &DesignMatrix, params: &'a GbmParams) -> Self {
        let columns: Vec<Vec<f64>> = (0..dm.p()).map(|j| dm.column_values(j)).collect();
        let orders = columns
            .iter()
            .map(|c| {
                let mut o: Vec<usize> = (0..c.len()).collect();
                o.sort_by(|&a, &b| c[a].total_cmp(&c[b]));
                o
            })
            .collect();
        Self {
            columns,
            orders,
            params,
        }
    }

    /// Grows one least-squares tree on the residuals `r` and returns each
    /// row's leaf value (Newton step `Σr / Σh` within the leaf).
    fn tree_step(&self, r: &[f64], h: &[f64]) -> Vec<f64> {
        let n = r.len();
        let min_leaf = self.params.min_leaf;
        let mut node_of = vec![0usize; n];
        let mut n_nodes = 1;
        let mut active = vec![true];

        for _ in 0..self.params.depth {
            let mut total = vec![Accum::default(); n_nodes];
            for i in 0..n {
                total[node_of[i]].sum += r[i];
                total[node_of[i]].count += 1;
            }
            let mut best: Vec<Option<Split>> = vec![None; n_nodes];
            for (feature, order) in self.orders.iter().enumerate() {
                let x = &self.columns[feature];
                let mut left = vec![Accum::default(); n_nodes];
                for &i in order {
                    let k = node_of[i];
                    if !active[k] {
                        continue;
                    }
                    let l = &mut left[k];
                    let tot = &total[k];
                    if l.count >= min_leaf && tot.count - l.count >= min_leaf && x[i] > l.last {
                        let nr = (tot.count - l.count) as f64;
                        let sr = tot.sum - l.sum;
                        let gain = l.sum * l.sum / l.count as f64 + sr * sr / nr
                            - tot.sum * tot.sum / tot.count as f64;
                        if best[k].is_none_or(|b| gain > b.gain) {
                            best[k] = Some(Split {
                                gain,
                                feature,
                                threshold: 0.5 * (l.last + x[i]),
                            });
                        }
                    }
                    l.sum += r[i];
                    l.count += 1;
                    l.last = x[i];
                }
            }

            let mut children = vec![None; n_nodes];
            let mut next_active = vec![false; n_nodes];
            for k in 0..n_nodes {
                if let Some(s) = best[k].filter(|s| active[k] && s.gain > 1e-12) {
                    children[k] = Some((next_active.len(), s));
                    next_active.push(true);
                    next_active.push(true);
                }
            }
            if children.iter().all(Option::is_none) {
                break;
            }
            for i in 0..n {
                if let Some((left_id, s)) = children[node_of[i]] {
                    node_of[i] = if self.columns[s.feature][i] <= s.threshold {
                        left_id
                    } else {
                        left_id + 1
                    };
                }
            }
            n_nodes = next_active.len();
            active = next_active;
        }

        let mut num = vec![0.0; n_nodes];
        let mut den = vec![0.0; n_nodes];
        for i in 0..n {
            num[node_of[i]] += r[i];
            den[node_of[i]] += h[i];
        }
        let value: Vec<f64> = num
            .iter()
            .zip(&den)
            .map(|(&a, &b)| if b > 1e-300 { a / b } else { 0.0 })
            .collect();
        node_of.iter().map(|&k| value[k]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BestIterate {
    index: usize,
    p: Vec<f64>,
}

/// A boosting run with balance recorded at every evaluated iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GbmPath {
    /// Tree counts at which balance was evaluated (starting at 0).
    pub iterations: Vec<usize>,
    pub mean_smd: Vec<f64>,
    pub max_ks: Vec<f64>,
    best_es: BestIterate,
    best_ks: BestIterate,
    warnings: Vec<String>,
}

impl GbmPath {
    pub fn criterion(&self, rule: StopRule) -> &[f64] {
        match rule {
            StopRule::MeanSmd => &self.mean_smd,
            StopRule::MaxKs => &self.max_ks,
        }
    }

    fn best(&self, rule: StopRule) -> &BestIterate {
        match rule {
            StopRule::MeanSmd => &self.best_es,
            StopRule::MaxKs => &self.best_ks,
        }
    }

    pub fn chosen_trees(&self, rule: StopRule) -> usize {
        self.iterations[self.best(rule).index]
    }

    /// Propensities at the iteration minimizing the rule's criterion.
    pub fn select(&self, rule: StopRule) -> PropensityFit {
        let best = self.best(rule);
        let crit = self.criterion(rule);
        let mut warnings = self.warnings.clone();
        let last = crit.len() - 1;
        if best.index == last && last > 0 && crit[last] < crit[last - 1] {
            warnings.push(format!(
                "balance criterion still decreasing at {} trees; increase max_trees",
                self.iterations[last]
            ));
        }
        PropensityFit {
            propensity: PropensityVector::new(best.p.clone(), rule.algorithm()),
            diagnostics: Diagnostics {
                converged: true,
                iterations: self.iterations[best.index],
                objective: crit[best.index],
                chosen_gbm_trees: Some(self.iterations[best.index]),
                warnings,
                dropped_columns: Vec::new(),
            },
        }
    }
}

/// Runs boosting for `params.max_trees` trees, evaluating both balance
/// criteria every `eval_stride` trees (and at 0 and at the end).
pub fn fit_gbm_path(dm: &DesignMatrix, estimand: Estimand, params: &GbmParams) -> Result<GbmPath> {
    params.validate()?;
    let (n0, n1) = dm.group_sizes();
    if n0 == 0 {
        return Err(Error::EmptyGroup("control"));
    }
    if n1 == 0 {
        return Err(Error::EmptyGroup("treatment"));
    }
    let n = dm.n();
    let mut warnings = Vec::new();
    if n < 50 {
        warnings.push(format!("only {n} rows; boosted propensity scores are unreliable below 50"));
    }
    let y: Vec<f64> = dm.treated().iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let booster = Booster::new(dm, params);
    let evaluator = BalanceEvaluator::new(dm);
    let mut f = vec![stats::logit(n1 as f64 / n as f64); n];

    let mut path = GbmPath {
        iterations: Vec::new(),
        mean_smd: Vec::new(),
        max_ks: Vec::new(),
        best_es: BestIterate { index: 0, p: Vec::new() },
        best_ks: BestIterate { index: 0, p: Vec::new() },
        warnings: Vec::new(),
    };
    let record = |trees: usize, f: &[f64], path: &mut GbmPath| -> Result<()> {
        let p: Vec<f64> = f.iter().map(|&v| expit(v)).collect();
        let ps = PropensityVector::new(p, Algorithm::GbmEs);
        let w = ps_to_weights(&ps, dm.treated(), estimand);
        let bal = evaluator.evaluate(&w)?;
        let (es, ks) = (bal.mean_smd(), bal.max_ks());
        let index = path.iterations.len();
        path.iterations.push(trees);
        path.mean_smd.push(es);
        path.max_ks.push(ks);
        if index == 0 || es < path.mean_smd[path.best_es.index] {
            path.best_es = BestIterate { index, p: ps.p.clone() };
        }
        if index == 0 || ks < path.max_ks[path.best_ks.index] {
            path.best_ks = BestIterate { index, p: ps.p };
        }
        Ok(())
    };

    record(0, &f, &mut path)?;
    let mut r = vec![0.0; n];
    let mut h = vec![0.0; n];
    for tree in 1..=params.max_trees {
        for i in 0..n {
            let p = expit(f[i]);
            r[i] = y[i] - p;
            h[i] = p * (1.0 - p);
        }
        let step = booster.tree_step(&r, &h);
        for i in 0..n {
            f[i] += params.shrinkage * step[i];
        }
        if tree % params.eval_stride == 0 || tree == params.max_trees {
            record(tree, &f, &mut path)?;
        }
    }
    path.warnings = warnings;
    Ok(path)
}

/// Boosted propensity scores stopped by `rule`.
pub fn fit_gbm_ps(
    dm: &DesignMatrix,
    rule: StopRule,
    estimand: Estimand,
    params: &GbmParams,
) -> Result<PropensityFit> {
    Ok(fit_gbm_path(dm, estimand, params)?.select(rule))
}
