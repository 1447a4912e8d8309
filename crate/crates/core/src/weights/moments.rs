use nalgebra::DMatrix;

use crate::data::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::stats;

/// Relative residual below which an expanded moment column counts as
/// collinear with earlier ones.
const COLLINEAR_TOL: f64 = 1e-8;

/// Standardized confounder powers used as balance constraints.
///
/// Numeric columns contribute centred powers `1..=m`; dummy columns only
/// their first power. Every column is centred and scaled to unit standard
/// deviation, and columns that are (numerically) linear combinations of the
/// intercept and earlier columns are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentExpansion {
    pub m: usize,
    pub z: DMatrix<f64>,
    pub names: Vec<String>,
    pub dropped: Vec<String>,
}

impl MomentExpansion {
    pub fn new(dm: &DesignMatrix, m: usize) -> Result<Self> {
        if !(1..=3).contains(&m) {
            return Err(Error::InvalidInput(format!("moment order must be 1, 2 or 3, got {m}")));
        }
        let n = dm.n();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut names = Vec::new();
        for (j, col) in dm.columns().iter().enumerate() {
            let x = dm.column_values(j);
            let powers = if col.is_dummy() { 1 } else { m };
            let centre = stats::mean(&x);
            for k in 1..=powers {
                let v: Vec<f64> = x.iter().map(|&xi| (xi - centre).powi(k as i32)).collect();
                cols.push(v);
                names.push(if k == 1 {
                    col.name.clone()
                } else {
                    format!("{}^{}", col.name, k)
                });
            }
        }

        let mut dropped = Vec::new();
        let mut kept_cols = Vec::new();
        let mut kept_names = Vec::new();
        for (v, name) in cols.into_iter().zip(names) {
            let mu = stats::mean(&v);
            let sd = stats::sd(&v);
            if !(sd > 0.0) || !sd.is_finite() {
                dropped.push(name);
                continue;
            }
            kept_cols.push(v.iter().map(|x| (x - mu) / sd).collect::<Vec<f64>>());
            kept_names.push(name);
        }

        let with_one = DMatrix::from_fn(n, kept_cols.len() + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                kept_cols[j - 1][i]
            }
        });
        let independent = linalg::independent_columns(&with_one, COLLINEAR_TOL);
        let mut final_cols = Vec::new();
        let mut final_names = Vec::new();
        for (j, name) in kept_names.into_iter().enumerate() {
            if independent.contains(&(j + 1)) {
                final_cols.push(j);
                final_names.push(name);
            } else {
                dropped.push(name);
            }
        }
        if final_cols.is_empty() {
            return Err(Error::InvalidInput("no usable confounder columns".into()));
        }
        let z = DMatrix::from_fn(n, final_cols.len(), |i, j| kept_cols[final_cols[j]][i]);
        Ok(Self {
            m,
            z,
            names: final_names,
            dropped,
        })
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }
}
