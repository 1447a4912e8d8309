//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Indices of a maximal linearly independent prefix-greedy subset of the
/// columns of `a`, found by modified Gram–Schmidt in column order. A column is
/// dropped when its residual norm after projecting out the kept columns falls
/// below `tol` times its own norm.
pub fn independent_columns(a: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..a.ncols() {
        let col = a.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = col;
        // Two passes keep the projection accurate for nearly dependent columns.
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if rn > tol * norm {
            basis.push(r / rn);
            keep.push(j);
        }
    }
    keep
}

/// Solves `a x = b` for symmetric positive (semi)definite `a`, adding a tiny
/// ridge if the plain Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut ridge = 1e-12 * scale;
    for _ in 0..8 {
        let mut reg = a.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += ridge;
        }
        if let Some(ch) = reg.cholesky() {
            return Some(ch.solve(b));
        }
        ridge *= 100.0;
    }
    None
}

pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// `Aᵀ diag(w) A`.
pub fn weighted_gram(a: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut scaled = a.clone();
    for (i, &wi) in w.iter().enumerate() {
        scaled.row_mut(i).scale_mut(wi);
    }
    a.transpose() * scaled
}

/// Prepends a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_column_is_dropped() {
        let a = DMatrix::from_row_slice(4, 3, &[1., 2., 2., 1., 3., 3., 1., 5., 5., 1., 7., 7.]);
        assert_eq!(independent_columns(&a, 1e-9), [0, 1]);
    }

    #[test]
    fn zero_column_is_dropped() {
        let a = DMatrix::from_row_slice(3, 2, &[0., 1., 0., 2., 0., 4.]);
        assert_eq!(independent_columns(&a, 1e-9), [1]);
    }

    #[test]
    fn spd_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[4., 1., 1., 3.]);
        let b = DVector::from_vec(vec![1., 2.]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((&a * x - b).norm() < 1e-12);
    }
}
