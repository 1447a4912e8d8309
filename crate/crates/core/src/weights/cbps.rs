//! Just-identified covariate balancing propensity score.
//!
//! The logit coefficients solve the balance conditions exactly:
//!
//! * ATE: `Σ [T/p − (1−T)/(1−p)] · z = 0`
//! * ATT: `Σ [T − (1−T)·p/(1−p)] · z = 0`
//!
//! for every column `z` of `[1, Z]`, where `Z` is the standardized moment
//! expansion. Both systems are the gradient of a strictly concave function of
//! the coefficients, so a damped Newton ascent on that function is used.

use nalgebra::{DMatrix, DVector};

use super::logistic::{fit_logistic, LogisticOptions};
use super::{Algorithm, Diagnostics, MomentExpansion, PropensityFit, PropensityVector};
use crate::data::{DesignMatrix, Estimand};
use crate::error::{Error, Result};
use crate::linalg;
use crate::stats::{self, expit};

const MAX_ITER: usize = 200;
/// Mean absolute moment at which a fit counts as converged.
const CONVERGED_TOL: f64 = 1e-6;
/// Newton keeps polishing until this, then stops.
const POLISH_TOL: f64 = 1e-11;
/// Extra Newton steps allowed once converged.
const POLISH_STEPS: usize = 3;
const EXP_CAP: f64 = 700.0;

fn exp_capped(x: f64) -> f64 {
    x.min(EXP_CAP).exp()
}

/// Concave potential whose gradient is the CBPS moment vector.
pub struct CbpsObjective<'a> {
    a: DMatrix<f64>,
    treated: &'a [bool],
    estimand: Estimand,
}

impl<'a> CbpsObjective<'a> {
    /// `z` excludes the intercept column; it is added here.
    pub fn new(z: &DMatrix<f64>, treated: &'a [bool], estimand: Estimand) -> Self {
        Self {
            a: linalg::with_intercept(z),
            treated,
            estimand: estimand.weighting(),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn eta(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.a * beta
    }

    pub fn value(&self, beta: &DVector<f64>) -> f64 {
        let eta = self.eta(beta);
        eta.iter()
            .zip(self.treated)
            .map(|(&e, &t)| match (self.estimand, t) {
                (Estimand::Ate, true) => e - exp_capped(-e),
                (Estimand::Ate, false) => -e - exp_capped(e),
                (_, true) => e,
                (_, false) => -exp_capped(e),
            })
            .sum()
    }

    /// Per-row multipliers `a_i` of the moment sum `Σ a_i z_i`, and the
    /// curvature `c_i ≥ 0` with Hessian `−Σ c_i z_i z_iᵀ`.
    fn row_terms(&self, eta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        eta.iter()
            .zip(self.treated)
            .map(|(&e, &t)| match (self.estimand, t) {
                (Estimand::Ate, true) => (1.0 + exp_capped(-e), exp_capped(-e)),
                (Estimand::Ate, false) => (-(1.0 + exp_capped(e)), exp_capped(e)),
                (_, true) => (1.0, 0.0),
                (_, false) => (-exp_capped(e), exp_capped(e)),
            })
            .unzip()
    }

    /// Moment vector, i.e. the gradient of [`CbpsObjective::value`].
    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let (mult, _) = self.row_terms(&self.eta(beta));
        self.a.transpose() * DVector::from_vec(mult)
    }

    /// Negated Hessian (positive semidefinite).
    pub fn curvature(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let (_, curv) = self.row_terms(&self.eta(beta));
        linalg::weighted_gram(&self.a, &curv)
    }

    pub fn propensity(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.eta(beta).iter().map(|&e| expit(e)).collect()
    }
}

/// CBPS balancing the first `m` moments of every confounder.
pub fn fit_cbps(dm: &DesignMatrix, m: usize, estimand: Estimand) -> Result<PropensityFit> {
    let algorithm = match m {
        1 => Algorithm::Cbps1,
        2 => Algorithm::Cbps2,
        3 => Algorithm::Cbps3,
        _ => return Err(Error::InvalidInput(format!("CBPS moment order must be 1..=3, got {m}"))),
    };
    let mx = MomentExpansion::new(dm, m)?;
    let n = dm.n() as f64;
    let objective = CbpsObjective::new(&mx.z, dm.treated(), estimand);
    let k = objective.dim();

    let mut warnings = Vec::new();
    let mut beta = match fit_logistic(&mx.z, dm.treated(), None, &mx.names, &LogisticOptions::default()) {
        Ok(fit) if !fit.separation => {
            let mut b = DVector::zeros(k);
            b[0] = fit.intercept;
            for j in 0..k - 1 {
                b[j + 1] = fit.coefficients[j];
            }
            b
        }
        _ => {
            warnings.push("logistic start failed; starting from the marginal rate".to_string());
            let (n0, n1) = dm.group_sizes();
            let mut b = DVector::zeros(k);
            b[0] = stats::logit(n1 as f64 / (n0 + n1) as f64);
            b
        }
    };

    let mut value = objective.value(&beta);
    let mut grad = objective.gradient(&beta);
    let mut iterations = 0;
    let mut polish = 0;
    while iterations < MAX_ITER && grad.amax() / n > POLISH_TOL && polish <= POLISH_STEPS {
        iterations += 1;
        if grad.amax() / n < CONVERGED_TOL {
            polish += 1;
        }
        let curv = objective.curvature(&beta);
        let Some(dir) = linalg::solve_spd(&curv, &grad) else {
            break;
        };
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &beta + &dir * step;
            let v = objective.value(&cand);
            if v.is_finite() && v >= value + 1e-4 * step * slope {
                beta = cand;
                value = v;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        grad = objective.gradient(&beta);
    }

    let max_moment = grad.amax() / n;
    let converged = max_moment < CONVERGED_TOL;
    if !converged {
        warnings.push(format!(
            "balance conditions not met after {iterations} iterations (max |moment| {max_moment:.2e})"
        ));
    }
    Ok(PropensityFit {
        propensity: PropensityVector::new(objective.propensity(&beta), algorithm),
        diagnostics: Diagnostics {
            converged,
            iterations,
            objective: max_moment,
            chosen_gbm_trees: None,
            warnings,
            dropped_columns: mx.dropped,
        },
    })
}
