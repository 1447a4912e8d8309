//! Weighted outcome regression combining balancing weights with covariate
//! adjustment, and export of the analysed rows with their weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{write_csv, DesignMatrix, Dataset, Estimand, Separator};
use crate::error::{Error, Result};
use crate::linalg;
use crate::weights::{Algorithm, WeightSet};

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

/// Regression table whose treatment row is the effect estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    /// Intercept, treatment, then every design column in order.
    pub rows: Vec<CoefficientRow>,
    pub effect: f64,
    pub algorithm_used: Algorithm,
    pub estimand: Estimand,
    pub n_used: usize,
    pub df: usize,
}

impl EffectEstimate {
    pub fn treatment_row(&self) -> &CoefficientRow {
        &self.rows[1]
    }
}

/// Coefficients, residuals and HC1 covariance of a weighted least-squares
/// fit.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    pub beta: DVector<f64>,
    pub residuals: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub df: usize,
}

/// Weighted least squares of `y` on the columns of `a` (which must already
/// contain any intercept), solved by QR of `W^½ A`. Standard errors are the
/// HC1-scaled sandwich `B (Σ wᵢ² eᵢ² aᵢaᵢᵀ) B · n/(n−k)` with
/// `B = (AᵀWA)⁻¹`.
pub fn weighted_least_squares(a: &DMatrix<f64>, names: &[String], y: &[f64], w: &[f64]) -> Result<WlsFit> {
    let (n, k) = a.shape();
    if y.len() != n || w.len() != n || names.len() != k {
        return Err(Error::InvalidInput("regression inputs disagree in size".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("outcome contains non-finite values".into()));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidInput("weights must be finite, non-negative and not all zero".into()));
    }
    if n <= k {
        return Err(Error::InvalidInput(format!(
            "{n} rows are not enough for {k} regression terms"
        )));
    }
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let aw = DMatrix::from_fn(n, k, |i, j| a[(i, j)] * sw[i]);
    let independent = linalg::independent_columns(&aw, 1e-9);
    if independent.len() < k {
        let collinear = (0..k)
            .filter(|j| !independent.contains(j))
            .map(|j| names[j].clone())
            .collect();
        return Err(Error::Collinear(collinear));
    }
    let yw = DVector::from_fn(n, |i, _| y[i] * sw[i]);
    let qr = aw.qr();
    let r = qr.r();
    let qty = qr.q().transpose() * yw;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numeric("singular triangular factor in regression".into()))?;
    let fitted = a * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();

    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular triangular factor in regression".into()))?;
    let bread = &r_inv * r_inv.transpose();
    let meat_w: Vec<f64> = (0..n).map(|i| (w[i] * residuals[i]).powi(2)).collect();
    let meat = linalg::weighted_gram(a, &meat_w);
    let covariance = &bread * meat * &bread * (n as f64 / (n - k) as f64);
    Ok(WlsFit {
        beta,
        residuals,
        covariance,
        df: n - k,
    })
}

/// `[1, T, X]` with `T` in the reported orientation, plus term names.
pub fn outcome_design(dm: &DesignMatrix) -> (DMatrix<f64>, Vec<String>) {
    let t = dm.reported_treated();
    let a = DMatrix::from_fn(dm.n(), dm.p() + 2, |i, j| match j {
        0 => 1.0,
        1 => f64::from(u8::from(t[i])),
        _ => dm.x()[(i, j - 2)],
    });
    let mut names = vec![INTERCEPT.to_string(), dm.treatment_name().to_string()];
    names.extend(dm.column_names().iter().map(|s| s.to_string()));
    (a, names)
}

fn two_sided_p(t: f64, df: usize) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Weighted regression of the outcome on treatment and every design column.
/// The treatment coefficient is the effect estimate for the design's
/// estimand.
pub fn fit_doubly_robust(dm: &DesignMatrix, weights: &WeightSet) -> Result<EffectEstimate> {
    if weights.w.len() != dm.n() {
        return Err(Error::InvalidInput("weight vector length mismatch".into()));
    }
    let (a, names) = outcome_design(dm);
    let fit = weighted_least_squares(&a, &names, dm.y(), &weights.w)?;
    let rows: Vec<CoefficientRow> = names
        .into_iter()
        .enumerate()
        .map(|(j, term)| {
            let estimate = fit.beta[j];
            let se = fit.covariance[(j, j)].max(0.0).sqrt();
            let t = if se > 0.0 {
                estimate / se
            } else if estimate == 0.0 {
                0.0
            } else {
                estimate.signum() * f64::INFINITY
            };
            CoefficientRow {
                term,
                estimate,
                se,
                t,
                p: two_sided_p(t, fit.df),
            }
        })
        .collect();
    Ok(EffectEstimate {
        effect: rows[1].estimate,
        rows,
        algorithm_used: weights.algorithm,
        estimand: dm.estimand(),
        n_used: dm.n(),
        df: fit.df,
    })
}

/// The analysed rows of `data` (after trimming and complete-case removal)
/// with one weight column per weight set, named by algorithm id.
pub fn export_data_and_weights(
    data: &Dataset,
    dm: &DesignMatrix,
    weight_sets: &[WeightSet],
    separator: Separator,
) -> Result<Vec<u8>> {
    let mut out = data.select_rows(dm.row_ids());
    for ws in weight_sets {
        if ws.w.len() != dm.n() {
            return Err(Error::InvalidInput("weight vector length mismatch".into()));
        }
        let mut name = ws.algorithm.id().to_string();
        while out.column(&name).is_some() {
            name = format!("w_{name}");
        }
        out = out.with_numeric_column(&name, ws.w.iter().map(|&v| Some(v)).collect())?;
    }
    Ok(write_csv(&out, separator))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::Diagnostics;

    fn weight_set(w: Vec<f64>) -> WeightSet {
        WeightSet {
            w,
            algorithm: Algorithm::Lr,
            estimand: Estimand::Ate,
            diagnostics: Diagnostics::default(),
            propensity: None,
        }
    }

    fn design(n: usize) -> DesignMatrix {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.83).sin() * 2.0).collect();
        let t: Vec<bool> = (0..n).map(|i| (i * 7) % 3 == 0).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.0 + 2.0 * f64::from(u8::from(t[i])) + 3.0 * x[i] + (i as f64 * 1.7).cos())
            .collect();
        DesignMatrix::from_columns(t, &[("x", x)], y, Estimand::Ate).unwrap()
    }

    #[test]
    fn exact_linear_model() {
        let base = design(30);
        let y: Vec<f64> = (0..30)
            .map(|i| 2.0 * f64::from(u8::from(base.treated()[i])) + 3.0 * base.x()[(i, 0)])
            .collect();
        let dm = base.with_outcome(y).unwrap();
        let w: Vec<f64> = (0..30).map(|i| 0.5 + (i % 4) as f64).collect();
        let est = fit_doubly_robust(&dm, &weight_set(w)).unwrap();
        assert!((est.effect - 2.0).abs() < 1e-10);
        assert!(est.treatment_row().se < 1e-8);
        assert_eq!(est.rows[0].term, INTERCEPT);
        assert_eq!(est.rows[1].term, "treat");
        assert_eq!(est.rows[2].term, "x");
    }

    #[test]
    fn weight_scale_invariance() {
        let dm = design(40);
        let w: Vec<f64> = (0..40).map(|i| 0.2 + (i % 5) as f64).collect();
        let a = fit_doubly_robust(&dm, &weight_set(w.clone())).unwrap();
        let b = fit_doubly_robust(&dm, &weight_set(w.iter().map(|v| v * 7.5).collect())).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert!((ra.estimate - rb.estimate).abs() < 1e-10);
            assert!((ra.se - rb.se).abs() < 1e-10 * ra.se.max(1.0));
        }
    }

    #[test]
    fn t_and_p_are_consistent() {
        let est = fit_doubly_robust(&design(50), &weight_set(vec![1.0; 50])).unwrap();
        for row in &est.rows {
            assert!((row.t - row.estimate / row.se).abs() < 1e-12 * row.t.abs().max(1.0));
            assert!((0.0..=1.0).contains(&row.p));
        }
        assert_eq!(est.df, 47);
    }

    #[test]
    fn collinear_column_is_named() {
        let base = design(20);
        let dm = base.with_column("x2", &base.column_values(0)).unwrap();
        match fit_doubly_robust(&dm, &weight_set(vec![1.0; 20])) {
            Err(Error::Collinear(names)) => assert_eq!(names, ["x2"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
