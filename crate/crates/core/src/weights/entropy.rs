//! Entropy balancing solved in the dual.
//!
//! Source-group weights `w_i ∝ exp(−λ·c_i)`, with `c_i` the row's moment
//! vector minus the target moments, minimize the KL divergence to uniform
//! weights subject to exact moment balance. `λ` minimizes the convex dual
//! `log Σ exp(−λ·c_i)`.

use nalgebra::{DMatrix, DVector};

use super::{Algorithm, Diagnostics, MomentExpansion, WeightSet};
use crate::data::{DesignMatrix, Estimand};
use crate::error::{Error, Result};
use crate::linalg;

/// Largest admissible weighted-moment violation (standardized units).
const TOL: f64 = 1e-8;
/// Newton stops early once the violation is this small.
const POLISH_TOL: f64 = 1e-12;
/// Extra Newton steps allowed once the violation is below `TOL`.
const POLISH_STEPS: usize = 3;
const MAX_ITER: usize = 1000;
const LAMBDA_LIMIT: f64 = 1e6;

/// Dual objective of one entropy-balancing problem.
#[derive(Debug, Clone)]
pub struct EntropyDual {
    /// Source rows minus target moments, one row per unit.
    c: DMatrix<f64>,
}

impl EntropyDual {
    pub fn new(source: &DMatrix<f64>, target: &DVector<f64>) -> Self {
        let mut c = source.clone();
        for mut row in c.row_iter_mut() {
            row -= target.transpose();
        }
        Self { c }
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    fn scores(&self, lambda: &DVector<f64>) -> DVector<f64> {
        -(&self.c * lambda)
    }

    /// Normalized weights (summing to one) at `lambda`.
    pub fn weights(&self, lambda: &DVector<f64>) -> Vec<f64> {
        let s = self.scores(lambda);
        let mx = s.max();
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    /// `log Σ exp(−λ·c_i)`.
    pub fn value(&self, lambda: &DVector<f64>) -> f64 {
        let s = self.scores(lambda);
        let mx = s.max();
        mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    }

    /// `−Σ w_i c_i`: the negated weighted moment imbalance.
    pub fn gradient(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let w = DVector::from_vec(self.weights(lambda));
        -(self.c.transpose() * w)
    }

    /// Weighted covariance of the moment rows.
    pub fn hessian(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        let w = self.weights(lambda);
        let mean = self.c.transpose() * DVector::from_column_slice(&w);
        linalg::weighted_gram(&self.c, &w) - &mean * mean.transpose()
    }
}

struct DualSolution {
    weights: Vec<f64>,
    iterations: usize,
    value: f64,
}

fn solve_dual(dual: &EntropyDual, names: &[String]) -> Result<DualSolution> {
    let q = dual.dim();
    // A moment that is constant over the source rows cannot move.
    for j in 0..q {
        let col = dual.c.column(j);
        if col.max() - col.min() <= 1e-12 * col.amax().max(1.0) && col[0].abs() > TOL {
            return Err(Error::Infeasible {
                constraint: names.get(j).cloned().unwrap_or_default(),
                violation: col[0].abs(),
            });
        }
    }
    let mut lambda = DVector::zeros(q);
    let mut value = dual.value(&lambda);
    let mut grad = dual.gradient(&lambda);
    let mut iterations = 0;
    let mut polish = 0;
    while grad.amax() > POLISH_TOL && iterations < MAX_ITER && polish <= POLISH_STEPS {
        iterations += 1;
        if grad.amax() < TOL {
            polish += 1;
        }
        let h = dual.hessian(&lambda);
        let Some(dir) = linalg::solve_spd(&h, &(-&grad)) else {
            break;
        };
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &lambda + &dir * step;
            let v = dual.value(&cand);
            if v.is_finite() && v <= value + 1e-4 * step * slope {
                lambda = cand;
                value = v;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        grad = dual.gradient(&lambda);
        if !moved || lambda.norm() > LAMBDA_LIMIT {
            break;
        }
    }
    let violation = grad.amax();
    if violation > TOL || lambda.norm() > LAMBDA_LIMIT {
        let worst = grad.iamax();
        return Err(Error::Infeasible {
            constraint: names.get(worst).cloned().unwrap_or_default(),
            violation,
        });
    }
    Ok(DualSolution {
        weights: dual.weights(&lambda),
        iterations,
        value,
    })
}

fn rows_of(z: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    z.select_rows(rows)
}

fn column_means(z: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(z.ncols(), |j, _| z.column(j).mean())
}

/// Entropy-balancing weights matching the first `m` moments.
///
/// ATT reweights controls to the treated moments (treated weights stay 1);
/// ATE reweights each group to the pooled-sample moments. Each group's
/// weights sum to its size.
pub fn fit_entropy_balance(dm: &DesignMatrix, m: usize, estimand: Estimand) -> Result<WeightSet> {
    let algorithm = match m {
        1 => Algorithm::Eb1,
        2 => Algorithm::Eb2,
        3 => Algorithm::Eb3,
        _ => return Err(Error::InvalidInput(format!("EB moment order must be 1..=3, got {m}"))),
    };
    let mx = MomentExpansion::new(dm, m)?;
    let treated = dm.treated();
    let controls: Vec<usize> = (0..dm.n()).filter(|&i| !treated[i]).collect();
    let treats: Vec<usize> = (0..dm.n()).filter(|&i| treated[i]).collect();
    if controls.is_empty() {
        return Err(Error::EmptyGroup("control"));
    }
    if treats.is_empty() {
        return Err(Error::EmptyGroup("treatment"));
    }

    let mut w = vec![1.0; dm.n()];
    let mut iterations = 0;
    let mut objective = 0.0;
    let mut reweight = |rows: &[usize], target: &DVector<f64>, w: &mut [f64]| -> Result<()> {
        let dual = EntropyDual::new(&rows_of(&mx.z, rows), target);
        let sol = solve_dual(&dual, &mx.names)?;
        let scale = rows.len() as f64;
        for (&i, &wi) in rows.iter().zip(&sol.weights) {
            w[i] = wi * scale;
        }
        iterations += sol.iterations;
        objective += sol.value;
        Ok(())
    };
    let estimand = estimand.weighting();
    match estimand {
        Estimand::Ate => {
            let target = column_means(&mx.z);
            reweight(&controls, &target, &mut w)?;
            reweight(&treats, &target, &mut w)?;
        }
        _ => {
            let target = column_means(&rows_of(&mx.z, &treats));
            reweight(&controls, &target, &mut w)?;
        }
    }

    Ok(WeightSet {
        w,
        algorithm,
        estimand,
        diagnostics: Diagnostics {
            converged: true,
            iterations,
            objective,
            chosen_gbm_trees: None,
            warnings: Vec::new(),
            dropped_columns: mx.dropped,
        },
        propensity: None,
    })
}
