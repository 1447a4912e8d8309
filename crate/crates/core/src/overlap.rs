//! Overlap diagnostics and analyst-driven tail trimming.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::DesignMatrix;
use crate::error::{Error, Result};
use crate::stats;

/// Hard ceiling on the number of grid points a density is evaluated on.
const MAX_GRID: usize = 65_536;

/// Gaussian kernel density estimate evaluated on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl Density {
    /// Trapezoid-rule integral of the density over its grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(g, d)| 0.5 * (g[1] - g[0]) * (d[0] + d[1]))
            .sum()
    }
}

/// Density of one confounder within one group (`group` is 1 for treatment
/// in the user's orientation). A group whose values are all identical gets
/// a spike marker instead of a curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub confounder: String,
    pub group: u8,
    #[serde(flatten)]
    pub shape: DensityShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum DensityShape {
    Curve(Density),
    Spike { value: f64 },
}

/// Silverman's rule of thumb, `0.9 · min(sd, IQR/1.34) · n^(−1/5)`. Falls
/// back to the standard deviation when the interquartile range is zero.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let sorted = stats::sorted_copy(values);
    let sd = stats::sd(values);
    let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
    let spread = match sd.min(iqr / 1.34) {
        s if s > 0.0 => s,
        _ => sd,
    };
    0.9 * spread * (values.len() as f64).powf(-0.2)
}

/// Kernel density estimate with Silverman's bandwidth on a grid spanning
/// `[min − 3·bw, max + 3·bw]`.
///
/// `grid_size` is a lower bound: the grid is refined until its spacing is at
/// most a quarter bandwidth so the curve still integrates to one when the
/// data contain far outliers.
pub fn density(values: &[f64], grid_size: usize) -> Result<Density> {
    let sorted = stats::sorted_copy(values);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("density input must be finite".into()));
    }
    let (lo_v, hi_v) = match (sorted.first(), sorted.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        _ => {
            return Err(Error::DegenerateDensity(
                "need at least two distinct values".into(),
            ))
        }
    };
    let bw = silverman_bandwidth(values);
    let lo = lo_v - 3.0 * bw;
    let hi = hi_v + 3.0 * bw;
    let needed = ((hi - lo) / (0.25 * bw)).ceil() as usize + 1;
    let g = grid_size.max(needed).clamp(2, MAX_GRID);
    let step = (hi - lo) / (g - 1) as f64;

    let norm = 1.0 / (values.len() as f64 * bw * (2.0 * PI).sqrt());
    let reach = 8.0 * bw;
    let grid: Vec<f64> = (0..g).map(|k| lo + k as f64 * step).collect();
    let density = grid
        .iter()
        .map(|&x| {
            let start = sorted.partition_point(|&v| v < x - reach);
            let end = sorted.partition_point(|&v| v <= x + reach);
            sorted[start..end]
                .iter()
                .map(|&v| {
                    let u = (x - v) / bw;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(Density {
        grid,
        density,
        bandwidth: bw,
    })
}

/// Per-group densities of every design column.
pub fn group_densities(dm: &DesignMatrix, grid_size: usize) -> Vec<DensityCurve> {
    let reported = dm.reported_treated();
    let mut out = Vec::with_capacity(2 * dm.p());
    for (j, col) in dm.columns().iter().enumerate() {
        for group in [0u8, 1] {
            let vals: Vec<f64> = (0..dm.n())
                .filter(|&i| reported[i] == (group == 1))
                .map(|i| dm.x()[(i, j)])
                .collect();
            let shape = match density(&vals, grid_size) {
                Ok(d) => DensityShape::Curve(d),
                Err(_) => DensityShape::Spike {
                    value: vals.first().copied().unwrap_or(f64::NAN),
                },
            };
            out.push(DensityCurve {
                confounder: col.name.clone(),
                group,
                shape,
            });
        }
    }
    out
}

/// Removes rows whose `confounder` value lies strictly below `lower_cut` or
/// strictly above `upper_cut`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimRule {
    pub confounder: String,
    #[serde(default)]
    pub lower_cut: Option<f64>,
    #[serde(default)]
    pub upper_cut: Option<f64>,
}

impl TrimRule {
    pub fn validate(&self) -> Result<()> {
        match (self.lower_cut, self.upper_cut) {
            (None, None) => Err(Error::InvalidInput(format!(
                "trim rule on `{}` has no cut",
                self.confounder
            ))),
            (Some(l), Some(u)) if l > u => Err(Error::InvalidInput(format!(
                "trim rule on `{}` has lower cut above upper cut",
                self.confounder
            ))),
            _ => Ok(()),
        }
    }

    fn excludes(&self, v: f64) -> bool {
        self.lower_cut.is_some_and(|l| v < l) || self.upper_cut.is_some_and(|u| v > u)
    }
}

/// Applies every rule to whole rows. Returns the trimmed design and the
/// original row ids that were removed, ascending.
pub fn apply_trims(dm: &DesignMatrix, rules: &[TrimRule]) -> Result<(DesignMatrix, Vec<usize>)> {
    let mut removed = BTreeSet::new();
    for rule in rules {
        rule.validate()?;
        let j = dm
            .column_index(&rule.confounder)
            .filter(|&j| !dm.columns()[j].is_dummy())
            .ok_or_else(|| Error::UnknownColumn(rule.confounder.clone()))?;
        for i in 0..dm.n() {
            if rule.excludes(dm.x()[(i, j)]) {
                removed.insert(i);
            }
        }
    }
    let keep: Vec<usize> = (0..dm.n()).filter(|i| !removed.contains(i)).collect();
    let trimmed = dm.select_rows(&keep);
    let (n0, n1) = trimmed.group_sizes();
    if n1 == 0 {
        return Err(Error::EmptyGroup("treatment"));
    }
    if n0 == 0 {
        return Err(Error::EmptyGroup("control"));
    }
    let removed_ids = removed.into_iter().map(|i| dm.row_ids()[i]).collect();
    Ok((trimmed, removed_ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapFlag {
    pub confounder: String,
    /// [1%, 99%] quantile range among controls.
    pub control_range: (f64, f64),
    /// [1%, 99%] quantile range among the treated.
    pub treated_range: (f64, f64),
    pub flagged: bool,
}

/// Advisory flags: a confounder is flagged when the groups' [1%, 99%]
/// quantile ranges do not intersect.
pub fn overlap_flags(dm: &DesignMatrix) -> Vec<OverlapFlag> {
    let reported = dm.reported_treated();
    dm.columns()
        .iter()
        .enumerate()
        .map(|(j, col)| {
            let range = |flag: bool| {
                let vals: Vec<f64> = (0..dm.n())
                    .filter(|&i| reported[i] == flag)
                    .map(|i| dm.x()[(i, j)])
                    .collect();
                let s = stats::sorted_copy(&vals);
                (stats::quantile_sorted(&s, 0.01), stats::quantile_sorted(&s, 0.99))
            };
            let c = range(false);
            let t = range(true);
            OverlapFlag {
                confounder: col.name.clone(),
                control_range: c,
                treated_range: t,
                flagged: c.0 > t.1 || t.0 > c.1,
            }
        })
        .collect()
}
