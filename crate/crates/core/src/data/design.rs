use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::spec::{AnalysisSpec, Estimand};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Dummy { source: String, level: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub kind: ColumnKind,
}

impl DesignColumn {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn is_dummy(&self) -> bool {
        matches!(self.kind, ColumnKind::Dummy { .. })
    }
}

/// Complete-case numeric encoding of a dataset under an [`AnalysisSpec`].
///
/// `treated` is in the weighting orientation: for ATC the group labels are
/// flipped so every engine can run as ATT. [`DesignMatrix::reported_treated`]
/// undoes the flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    treated: Vec<bool>,
    x: DMatrix<f64>,
    columns: Vec<DesignColumn>,
    y: Vec<f64>,
    row_ids: Vec<usize>,
    dropped_count: usize,
    estimand: Estimand,
    treatment_name: String,
    outcome_name: String,
}

impl DesignMatrix {
    /// Assembles a design matrix from raw parts. `treated` must already be in
    /// the weighting orientation.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        treated: Vec<bool>,
        x: DMatrix<f64>,
        columns: Vec<DesignColumn>,
        y: Vec<f64>,
        row_ids: Vec<usize>,
        estimand: Estimand,
        treatment_name: impl Into<String>,
        outcome_name: impl Into<String>,
    ) -> Result<Self> {
        let n = treated.len();
        if x.nrows() != n || y.len() != n || row_ids.len() != n {
            return Err(Error::InvalidInput("design parts disagree on row count".into()));
        }
        if x.ncols() != columns.len() {
            return Err(Error::InvalidInput(
                "design column metadata does not match matrix width".into(),
            ));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite values".into()));
        }
        Ok(Self {
            treated,
            x,
            columns,
            y,
            row_ids,
            dropped_count: 0,
            estimand,
            treatment_name: treatment_name.into(),
            outcome_name: outcome_name.into(),
        })
    }

    /// Convenience constructor for numeric-only designs.
    pub fn from_columns(
        treated: Vec<bool>,
        columns: &[(&str, Vec<f64>)],
        y: Vec<f64>,
        estimand: Estimand,
    ) -> Result<Self> {
        let n = treated.len();
        if columns.iter().any(|(_, v)| v.len() != n) {
            return Err(Error::InvalidInput("column length mismatch".into()));
        }
        let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j].1[i]);
        let meta = columns.iter().map(|(n, _)| DesignColumn::numeric(*n)).collect();
        Self::from_parts(treated, x, meta, y, (0..n).collect(), estimand, "treat", "y")
    }

    pub fn n(&self) -> usize {
        self.treated.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn column_values(&self, j: usize) -> Vec<f64> {
        self.x.column(j).iter().copied().collect()
    }

    pub fn columns(&self) -> &[DesignColumn] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Group membership in the weighting orientation.
    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    /// Group membership in the user's original orientation.
    pub fn reported_treated(&self) -> Vec<bool> {
        let flip = self.is_flipped();
        self.treated.iter().map(|&t| t ^ flip).collect()
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn dropped_count(&self) -> usize {
        self.dropped_count
    }

    pub fn estimand(&self) -> Estimand {
        self.estimand
    }

    pub fn weighting_estimand(&self) -> Estimand {
        self.estimand.weighting()
    }

    pub fn is_flipped(&self) -> bool {
        self.estimand == Estimand::Atc
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    /// (control, treated) counts in the weighting orientation.
    pub fn group_sizes(&self) -> (usize, usize) {
        let nt = self.treated.iter().filter(|&&t| t).count();
        (self.n() - nt, nt)
    }

    /// Keeps the listed positions (not row ids), in order.
    pub fn select_rows(&self, positions: &[usize]) -> DesignMatrix {
        DesignMatrix {
            treated: positions.iter().map(|&i| self.treated[i]).collect(),
            x: self.x.select_rows(positions),
            columns: self.columns.clone(),
            y: positions.iter().map(|&i| self.y[i]).collect(),
            row_ids: positions.iter().map(|&i| self.row_ids[i]).collect(),
            dropped_count: self.dropped_count,
            estimand: self.estimand,
            treatment_name: self.treatment_name.clone(),
            outcome_name: self.outcome_name.clone(),
        }
    }

    /// Appends a numeric confounder column.
    pub fn with_column(&self, name: &str, values: &[f64]) -> Result<DesignMatrix> {
        if values.len() != self.n() {
            return Err(Error::InvalidInput("column length mismatch".into()));
        }
        if self.column_index(name).is_some() {
            return Err(Error::Schema(format!("duplicate design column `{name}`")));
        }
        let p = self.p();
        let mut x = self.x.clone().resize_horizontally(p + 1, 0.0);
        x.column_mut(p).copy_from_slice(values);
        let mut columns = self.columns.clone();
        columns.push(DesignColumn::numeric(name));
        Ok(DesignMatrix {
            x,
            columns,
            ..self.clone()
        })
    }

    /// Same rows and covariates with a different outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<DesignMatrix> {
        if y.len() != self.n() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("outcome must be finite with one value per row".into()));
        }
        Ok(DesignMatrix { y, ..self.clone() })
    }
}

/// Encodes the complete cases of `data` into a [`DesignMatrix`].
///
/// Categorical confounders become `k − 1` dummy columns named
/// `<variable>.<level>`, leaving out the reference level.
pub fn encode_design(data: &Dataset, spec: &AnalysisSpec) -> Result<DesignMatrix> {
    let tcol = data.require(&spec.treatment)?;
    let labels = tcol.distinct_labels(0..data.n_rows());
    if labels.len() > 2 {
        return Err(Error::MultiGroup {
            column: spec.treatment.clone(),
            levels: labels.len(),
        });
    }
    spec.validate(data)?;

    let ycol = data.require(&spec.outcome)?;
    let conf_cols = spec
        .confounder_names()
        .map(|n| data.require(n))
        .collect::<Result<Vec<_>>>()?;

    let keep: Vec<usize> = (0..data.n_rows())
        .filter(|&r| {
            !tcol.is_missing(r) && !ycol.is_missing(r) && conf_cols.iter().all(|c| !c.is_missing(r))
        })
        .collect();
    let dropped_count = data.n_rows() - keep.len();

    let flip = spec.estimand == Estimand::Atc;
    let treated: Vec<bool> = keep
        .iter()
        .map(|&r| (tcol.label(r).as_deref() == Some(spec.treatment_label.as_str())) ^ flip)
        .collect();
    if !treated.iter().any(|&t| t) {
        return Err(Error::EmptyGroup("treatment"));
    }
    if treated.iter().all(|&t| t) {
        return Err(Error::EmptyGroup("control"));
    }

    let mut columns = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for name in &spec.numeric_confounders {
        let col = data.require(name)?;
        columns.push(DesignColumn::numeric(name.clone()));
        values.push(keep.iter().map(|&r| col.numeric_value(r).unwrap()).collect());
    }
    for cat in &spec.categorical_confounders {
        let col = data.require(&cat.name)?;
        let present = col.distinct_labels(keep.iter().copied());
        if present.len() < 2 || !present.contains(&cat.reference) {
            return Err(Error::DegenerateColumn(cat.name.clone()));
        }
        let row_labels: Vec<String> = keep.iter().map(|&r| col.label(r).unwrap()).collect();
        for level in present.iter().filter(|l| **l != cat.reference) {
            columns.push(DesignColumn {
                name: format!("{}.{}", cat.name, level),
                kind: ColumnKind::Dummy {
                    source: cat.name.clone(),
                    level: level.clone(),
                },
            });
            values.push(
                row_labels
                    .iter()
                    .map(|l| if l == level { 1.0 } else { 0.0 })
                    .collect(),
            );
        }
    }

    let n = keep.len();
    let x = DMatrix::from_fn(n, values.len(), |i, j| values[j][i]);
    let y = keep.iter().map(|&r| ycol.numeric_value(r).unwrap()).collect();
    Ok(DesignMatrix {
        treated,
        x,
        columns,
        y,
        row_ids: keep,
        dropped_count,
        estimand: spec.estimand,
        treatment_name: spec.treatment.clone(),
        outcome_name: spec.outcome.clone(),
    })
}

/// Display text of the treatment-allocation and outcome models.
pub fn model_formulas(dm: &DesignMatrix) -> (String, String) {
    let rhs = dm.column_names().join(" + ");
    (
        format!("{} ~ {}", dm.treatment_name(), rhs),
        format!("{} ~ (Intercept) + {} + {}", dm.outcome_name(), dm.treatment_name(), rhs),
    )
}
