use nalgebra::{DMatrix, DVector};

use super::{Algorithm, Diagnostics, PropensityFit, PropensityVector};
use crate::data::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::stats::{self, expit};

/// Linear predictors beyond this magnitude are treated as a sign of
/// (quasi-)complete separation.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence when the largest absolute score component drops below this.
    pub score_tol: f64,
    /// Convergence when the relative deviance change drops below this.
    pub deviance_tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            score_tol: 1e-8,
            deviance_tol: 1e-10,
        }
    }
}

/// Maximum-likelihood logit fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub intercept: f64,
    /// One entry per input column; dropped columns get 0.
    pub coefficients: Vec<f64>,
    /// Standard errors, intercept first; NaN for dropped columns.
    pub std_errors: Vec<f64>,
    pub fitted: Vec<f64>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
    pub dropped: Vec<String>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli deviance as a function of the linear predictor.
pub(crate) fn deviance(eta: &[f64], y: &[bool]) -> f64 {
    2.0 * eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| if yi { softplus(-e) } else { softplus(e) })
        .sum::<f64>()
}

/// Logistic regression of `y` on `[1, x]` (plus an optional fixed offset) by
/// iteratively reweighted least squares with step halving.
///
/// Constant columns and columns collinear with earlier ones are dropped and
/// listed by name. Internally the columns are standardized; coefficients are
/// reported on the original scale.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[bool],
    offset: Option<&[f64]>,
    names: &[String],
    opts: &LogisticOptions,
) -> Result<LogisticFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || names.len() != p || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::InvalidInput("logistic inputs disagree in size".into()));
    }
    let n1 = y.iter().filter(|&&v| v).count();
    if n1 == 0 || n1 == n {
        return Err(Error::EmptyGroup(if n1 == 0 { "treatment" } else { "control" }));
    }

    let mut means = Vec::with_capacity(p);
    let mut sds = Vec::with_capacity(p);
    for j in 0..p {
        let c: Vec<f64> = x.column(j).iter().copied().collect();
        means.push(stats::mean(&c));
        sds.push(stats::sd(&c));
    }
    let std_x = DMatrix::from_fn(n, p, |i, j| {
        if sds[j] > 0.0 {
            (x[(i, j)] - means[j]) / sds[j]
        } else {
            0.0
        }
    });
    let independent = linalg::independent_columns(&linalg::with_intercept(&std_x), 1e-9);
    let kept: Vec<usize> = independent
        .into_iter()
        .filter(|&j| j > 0)
        .map(|j| j - 1)
        .collect();
    let dropped = (0..p)
        .filter(|j| !kept.contains(j))
        .map(|j| names[j].clone())
        .collect();
    let k = kept.len() + 1;
    let a = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { std_x[(i, kept[j - 1])] });
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);

    let ybar = (n1 as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let mut beta = DVector::zeros(k);
    beta[0] = if offset.is_some() { 0.0 } else { stats::logit(ybar) };
    let predictor = |beta: &DVector<f64>| -> Vec<f64> {
        let lin = &a * beta;
        (0..n).map(|i| lin[i] + off(i)).collect()
    };
    let mut eta = predictor(&beta);
    let mut dev = deviance(&eta, y);
    let mut converged = false;
    let mut separation = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let mut w = Vec::with_capacity(n);
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let pi = expit(eta[i]);
            w.push((pi * (1.0 - pi)).max(1e-300));
            resid[i] = if y[i] { 1.0 - pi } else { -pi };
        }
        let score = a.transpose() * &resid;
        if score.amax() < opts.score_tol {
            converged = true;
            break;
        }
        let info = linalg::weighted_gram(&a, &w);
        let step = linalg::solve_spd(&info, &score)
            .ok_or_else(|| Error::Numeric("singular information matrix in logistic fit".into()))?;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let cand_eta = predictor(&cand);
            let cand_dev = deviance(&cand_eta, y);
            if cand_dev.is_finite() && cand_dev <= dev + 1e-12 * dev.abs() {
                accepted = Some((cand, cand_eta, cand_dev));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_eta, cand_dev)) = accepted else {
            // No descent direction left: we are at the optimum up to rounding.
            converged = true;
            break;
        };
        if cand_eta.iter().any(|e| e.abs() > SEPARATION_ETA) {
            separation = true;
            break;
        }
        let rel = (dev - cand_dev).abs() / (cand_dev.abs() + 0.1);
        beta = cand;
        eta = cand_eta;
        dev = cand_dev;
        if rel < opts.deviance_tol {
            converged = true;
            break;
        }
    }

    // Map standardized coefficients back to the original scale.
    let mut coefficients = vec![0.0; p];
    let mut intercept = beta[0];
    for (slot, &j) in kept.iter().enumerate() {
        let b = beta[slot + 1] / sds[j];
        coefficients[j] = b;
        intercept -= b * means[j];
    }

    let w: Vec<f64> = eta
        .iter()
        .map(|&e| {
            let pi = expit(e);
            pi * (1.0 - pi)
        })
        .collect();
    let cov = linalg::inverse_spd(&linalg::weighted_gram(&a, &w));
    let mut std_errors = vec![f64::NAN; p + 1];
    if let Some(cov) = cov {
        let mut m = DMatrix::zeros(k, k);
        m[(0, 0)] = 1.0;
        for (slot, &j) in kept.iter().enumerate() {
            m[(0, slot + 1)] = -means[j] / sds[j];
            m[(slot + 1, slot + 1)] = 1.0 / sds[j];
        }
        let raw = &m * cov * m.transpose();
        std_errors[0] = raw[(0, 0)].sqrt();
        for (slot, &j) in kept.iter().enumerate() {
            std_errors[j + 1] = raw[(slot + 1, slot + 1)].sqrt();
        }
    }

    Ok(LogisticFit {
        intercept,
        coefficients,
        std_errors,
        fitted: eta.iter().map(|&e| expit(e)).collect(),
        deviance: dev,
        iterations,
        converged,
        separation,
        dropped,
    })
}

/// Propensity scores from a main-effects logistic regression of the group
/// indicator on every design column.
pub fn fit_logistic_ps(dm: &DesignMatrix) -> Result<PropensityFit> {
    let names: Vec<String> = dm.column_names().iter().map(|s| s.to_string()).collect();
    let fit = fit_logistic(dm.x(), dm.treated(), None, &names, &LogisticOptions::default())?;
    let mut warnings = Vec::new();
    if fit.separation {
        warnings.push(
            "perfect separation detected; coefficients kept at the last stable iterate and propensities clipped"
                .to_string(),
        );
    }
    if !fit.dropped.is_empty() {
        warnings.push(format!("dropped collinear columns: {}", fit.dropped.join(", ")));
    }
    Ok(PropensityFit {
        propensity: PropensityVector::new(fit.fitted.clone(), Algorithm::Lr),
        diagnostics: Diagnostics {
            converged: fit.converged,
            iterations: fit.iterations,
            objective: fit.deviance,
            chosen_gbm_trees: None,
            warnings,
            dropped_columns: fit.dropped,
        },
    })
}
