//! Sensitivity of the effect estimate to a simulated unobserved confounder.
//!
//! For each grid cell `(es, rho)` a confounder `U` is simulated whose
//! weighted standardized difference between groups is `es` and whose
//! correlation with the baseline outcome residuals is `rho`. Weights are
//! refitted with `U` as an extra confounder, the outcome model is refitted
//! with `U` as an extra regressor, and the resulting effects and p-values are
//! averaged over several draws.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::signed_smd;
use crate::data::DesignMatrix;
use crate::error::{Error, Result};
use crate::outcome::{fit_doubly_robust, outcome_design, weighted_least_squares, EffectEstimate};
use crate::stats::{self, logit};
use crate::weights::{
    compute_weights, fit_entropy_balance, fit_logistic, Algorithm, EngineConfig, LogisticOptions, PropensityFit,
    PropensityVector, WeightSet,
};

/// Largest admissible outcome association.
pub const MAX_RHO: f64 = 0.95;
/// Accepted targeting error of the realized `(es, rho)`.
pub const TARGET_TOL: f64 = 0.01;
pub const P_LEVELS: [f64; 2] = [0.05, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub es_min: f64,
    pub es_max: f64,
    pub es_points: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            es_min: -0.6,
            es_max: 0.6,
            es_points: 13,
            rho_min: 0.0,
            rho_max: 0.6,
            rho_points: 13,
        }
    }
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

impl GridSpec {
    /// A single cell.
    pub fn point(es: f64, rho: f64) -> Self {
        Self {
            es_min: es,
            es_max: es,
            es_points: 1,
            rho_min: rho,
            rho_max: rho,
            rho_points: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.es_points >= 1
            && self.rho_points >= 1
            && self.es_min.is_finite()
            && self.es_max >= self.es_min
            && self.rho_min >= 0.0
            && self.rho_max >= self.rho_min
            && self.rho_max < MAX_RHO;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid sensitivity grid: need es_min <= es_max, 0 <= rho_min <= rho_max < {MAX_RHO} and at least one point per axis"
            )))
        }
    }

    pub fn es_axis(&self) -> Vec<f64> {
        linspace(self.es_min, self.es_max, self.es_points)
    }

    pub fn rho_axis(&self) -> Vec<f64> {
        linspace(self.rho_min, self.rho_max, self.rho_points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub grid: GridSpec,
    pub draws: usize,
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            draws: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedPoint {
    pub name: String,
    pub es: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub effect: f64,
    pub p: f64,
}

/// Surfaces are stored row-major: entry `r * es_axis.len() + e` belongs to
/// `rho_axis[r]` and `es_axis[e]`. Missing cells are `None` and flagged in
/// `missing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub es_axis: Vec<f64>,
    pub rho_axis: Vec<f64>,
    pub effect_surface: Vec<Option<f64>>,
    pub pvalue_surface: Vec<Option<f64>>,
    /// Monte Carlo standard error of each cell's mean effect.
    pub effect_mc_se: Vec<Option<f64>>,
    pub missing: Vec<bool>,
    pub observed_points: Vec<ObservedPoint>,
    pub baseline: Baseline,
    pub draws_per_cell: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Suggested contour levels for the effect surface.
    pub effect_levels: Vec<f64>,
    pub p_levels: Vec<f64>,
}

impl SensitivityGrid {
    pub fn cell(&self, rho_index: usize, es_index: usize) -> usize {
        rho_index * self.es_axis.len() + es_index
    }
}

/// Run-time hooks for long grids.
#[derive(Default, Clone, Copy)]
pub struct RunControl<'a> {
    /// Evaluate cells on the rayon pool (otherwise sequentially).
    pub parallel: bool,
    /// Called with `(cells done, cells total)` after every cell.
    pub progress: Option<&'a (dyn Fn(usize, usize) + Sync)>,
    pub cancel: Option<&'a AtomicBool>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one draw in one cell, independent of evaluation order.
pub fn cell_seed(master: u64, es_index: usize, rho_index: usize, draw: usize) -> u64 {
    [es_index as u64, rho_index as u64, draw as u64]
        .into_iter()
        .fold(splitmix64(master), |h, v| splitmix64(h ^ splitmix64(v)))
}

fn standardized(v: &[f64]) -> Vec<f64> {
    let m = stats::mean(v);
    let s = stats::sd(v);
    v.iter().map(|x| if s > 0.0 { (x - m) / s } else { 0.0 }).collect()
}

/// Whether a confounder with association `es` to treatment and `rho` to the
/// outcome can be built with unit variance, given the treated share
/// `treated_share`. Depends on `es` only through `es²`.
pub fn is_feasible(es: f64, rho: f64, treated_share: f64) -> bool {
    let (a, b) = initial_loadings(es, rho, treated_share);
    rho.abs() < MAX_RHO && a * a + b * b < 1.0
}

/// Loadings on the standardized treatment indicator and residual that give
/// the requested moments when the noise part is independent of both.
fn initial_loadings(es: f64, rho: f64, treated_share: f64) -> (f64, f64) {
    let s = (treated_share * (1.0 - treated_share)).sqrt();
    (es * s / (1.0 + es * es * s * s).sqrt(), rho)
}

/// Fixed inputs shared by every cell of a grid.
pub struct SensitivityContext<'a> {
    dm: &'a DesignMatrix,
    weights: &'a WeightSet,
    engine: &'a EngineConfig,
    baseline: Baseline,
    t_std: Vec<f64>,
    resid_std: Vec<f64>,
    treated_share: f64,
    u_name: String,
}

impl<'a> SensitivityContext<'a> {
    pub fn new(
        dm: &'a DesignMatrix,
        weights: &'a WeightSet,
        baseline: &EffectEstimate,
        engine: &'a EngineConfig,
    ) -> Result<Self> {
        let (n0, n1) = dm.group_sizes();
        if n0 == 0 || n1 == 0 {
            return Err(Error::EmptyGroup(if n0 == 0 { "control" } else { "treatment" }));
        }
        let (a, names) = outcome_design(dm);
        let fit = weighted_least_squares(&a, &names, dm.y(), &weights.w)?;
        let t: Vec<f64> = dm.reported_treated().iter().map(|&t| f64::from(u8::from(t))).collect();
        let mut u_name = "U".to_string();
        while dm.column_index(&u_name).is_some() || u_name == dm.treatment_name() {
            u_name.push('_');
        }
        Ok(Self {
            dm,
            weights,
            engine,
            baseline: Baseline {
                effect: baseline.effect,
                p: baseline.treatment_row().p,
            },
            treated_share: stats::mean(&t),
            t_std: standardized(&t),
            resid_std: standardized(&fit.residuals),
            u_name,
        })
    }

    /// Treated-minus-control weighted SMD in the reported orientation.
    fn smd(&self, u: &[f64]) -> Result<f64> {
        let s = signed_smd(u, self.dm.treated(), &self.weights.w, self.dm.weighting_estimand())?;
        Ok(if self.dm.is_flipped() { -s } else { s })
    }

    fn moments(&self, a: f64, b: f64, zeta: &[f64]) -> Result<(Vec<f64>, Vector2<f64>)> {
        let c2 = 1.0 - a * a - b * b;
        if !(c2 > 0.0) {
            return Err(Error::Numeric("confounder loadings left no room for noise".into()));
        }
        let c = c2.sqrt();
        let u: Vec<f64> = (0..zeta.len())
            .map(|i| a * self.t_std[i] + b * self.resid_std[i] + c * zeta[i])
            .collect();
        let m = Vector2::new(self.smd(&u)?, stats::correlation(&u, &self.resid_std));
        Ok((u, m))
    }

    /// Simulates `U` with realized weighted SMD `es` and correlation `rho`
    /// with the baseline residuals, each within [`TARGET_TOL`].
    pub fn simulate(&self, es: f64, rho: f64, seed: u64) -> Result<Vec<f64>> {
        if !is_feasible(es, rho, self.treated_share) {
            return Err(Error::InvalidInput(format!("(es {es}, rho {rho}) is infeasible")));
        }
        let n = self.dm.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Remove the components along 1, the treatment indicator and the
        // residuals so the noise carries no association by itself.
        let mut zeta = standardized(&raw);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in [&self.t_std, &self.resid_std] {
            let mut q = v.clone();
            for b in &basis {
                let d: f64 = q.iter().zip(b).map(|(x, y)| x * y).sum();
                q.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                q.iter_mut().for_each(|x| *x /= norm);
                basis.push(q);
            }
        }
        for b in &basis {
            let d: f64 = zeta.iter().zip(b).map(|(x, y)| x * y).sum();
            zeta.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let zeta = standardized(&zeta);

        let target = Vector2::new(es, rho);
        let (mut a, mut b) = initial_loadings(es, rho, self.treated_share);
        let (mut u, mut m) = self.moments(a, b, &zeta)?;
        for _ in 0..20 {
            let gap = target - m;
            if gap.amax() < 1e-8 {
                break;
            }
            let h = 1e-6;
            let (_, ma) = self.moments(a + h, b, &zeta)?;
            let (_, mb) = self.moments(a, b + h, &zeta)?;
            let jac = Matrix2::from_columns(&[(ma - m) / h, (mb - m) / h]);
            let Some(step) = jac.lu().solve(&gap) else {
                break;
            };
            a += step[0];
            b += step[1];
            (u, m) = self.moments(a, b, &zeta)?;
        }
        if (target - m).amax() > TARGET_TOL {
            return Err(Error::Numeric(format!(
                "could not reach (es {es}, rho {rho}); realized ({:.3}, {:.3})",
                m[0], m[1]
            )));
        }
        Ok(u)
    }

    /// Weights from the chosen algorithm's family with `U` appended.
    fn refit_weights(&self, dm_u: &DesignMatrix, u: &[f64]) -> Result<WeightSet> {
        let algorithm = self.weights.algorithm;
        let estimand = self.dm.weighting_estimand();
        if let Some(m) = algorithm.moments().filter(|_| algorithm.is_entropy_balancing()) {
            return fit_entropy_balance(dm_u, m, estimand);
        }
        match (&self.weights.propensity, algorithm) {
            (Some(p), a) if a != Algorithm::Lr => {
                // Logistic update of the chosen scores by U.
                let offset: Vec<f64> = p.iter().map(|&v| logit(v)).collect();
                let x = nalgebra::DMatrix::from_column_slice(u.len(), 1, u);
                let fit = fit_logistic(
                    &x,
                    dm_u.treated(),
                    Some(&offset),
                    std::slice::from_ref(&self.u_name),
                    &LogisticOptions::default(),
                )?;
                let fit = PropensityFit {
                    propensity: PropensityVector::new(fit.fitted, algorithm),
                    diagnostics: Default::default(),
                };
                Ok(fit.into_weights(dm_u.treated(), estimand))
            }
            _ => compute_weights(dm_u, Algorithm::Lr, self.engine),
        }
    }

    /// Effect and p-value after adding a simulated confounder.
    pub fn refit(&self, u: &[f64]) -> Result<(f64, f64)> {
        let dm_u = self.dm.with_column(&self.u_name, u)?;
        let ws = self.refit_weights(&dm_u, u)?;
        ws.validate(dm_u.treated())?;
        let est = fit_doubly_robust(&dm_u, &ws)?;
        Ok((est.effect, est.treatment_row().p))
    }

    /// Observed confounders on the grid's axes: the unweighted signed SMD and
    /// the absolute correlation with the residuals of the weighted outcome
    /// model refitted without that confounder.
    pub fn observed_points(&self) -> Vec<ObservedPoint> {
        let (a, names) = outcome_design(self.dm);
        let ones = vec![1.0; self.dm.n()];
        (0..self.dm.p())
            .filter_map(|j| {
                let x = self.dm.column_values(j);
                let es = signed_smd(&x, self.dm.treated(), &ones, self.dm.weighting_estimand()).ok()?;
                let es = if self.dm.is_flipped() { -es } else { es };
                let keep: Vec<usize> = (0..a.ncols()).filter(|&k| k != j + 2).collect();
                let sub = a.select_columns(&keep);
                let sub_names: Vec<String> = keep.iter().map(|&k| names[k].clone()).collect();
                let fit = weighted_least_squares(&sub, &sub_names, self.dm.y(), &self.weights.w).ok()?;
                let rho = stats::correlation(&x, &fit.residuals).abs();
                Some(ObservedPoint {
                    name: names[j + 2].clone(),
                    es,
                    rho: if rho.is_finite() { rho } else { 0.0 },
                })
            })
            .collect()
    }
}

struct CellResult {
    effect: Option<f64>,
    p: Option<f64>,
    mc_se: Option<f64>,
}

fn run_cell(ctx: &SensitivityContext, config: &SensitivityConfig, es_index: usize, rho_index: usize, es: f64, rho: f64) -> CellResult {
    let missing = CellResult {
        effect: None,
        p: None,
        mc_se: None,
    };
    if !is_feasible(es, rho, ctx.treated_share) {
        return missing;
    }
    let mut effects = Vec::with_capacity(config.draws);
    let mut ps = Vec::with_capacity(config.draws);
    for draw in 0..config.draws {
        let seed = cell_seed(config.seed, es_index, rho_index, draw);
        match ctx.simulate(es, rho, seed).and_then(|u| ctx.refit(&u)) {
            Ok((e, p)) => {
                effects.push(e);
                ps.push(p);
            }
            Err(_) => return missing,
        }
    }
    let mc_se = if effects.len() > 1 {
        stats::sd(&effects) / (effects.len() as f64).sqrt()
    } else {
        0.0
    };
    CellResult {
        effect: Some(stats::mean(&effects)),
        p: Some(stats::mean(&ps)),
        mc_se: Some(mc_se),
    }
}

fn effect_levels(surface: &[Option<f64>], baseline: f64) -> Vec<f64> {
    let mut vals: Vec<f64> = surface.iter().flatten().copied().collect();
    if vals.is_empty() {
        return vec![baseline];
    }
    vals.sort_by(f64::total_cmp);
    let mut levels: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .map(|&q| stats::quantile_sorted(&vals, q))
        .collect();
    levels.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    levels
}

/// Evaluates the sensitivity grid around the chosen weights.
pub fn sensitivity_grid(
    dm: &DesignMatrix,
    weights: &WeightSet,
    baseline: &EffectEstimate,
    engine: &EngineConfig,
    config: &SensitivityConfig,
    control: RunControl,
) -> Result<SensitivityGrid> {
    config.grid.validate()?;
    if config.draws == 0 {
        return Err(Error::InvalidInput("draws must be at least 1".into()));
    }
    let ctx = SensitivityContext::new(dm, weights, baseline, engine)?;
    let es_axis = config.grid.es_axis();
    let rho_axis = config.grid.rho_axis();
    let cells: Vec<(usize, usize)> = (0..rho_axis.len())
        .flat_map(|r| (0..es_axis.len()).map(move |e| (r, e)))
        .collect();
    let total = cells.len();
    let done = AtomicUsize::new(0);
    let cancelled = || control.cancel.is_some_and(|c| c.load(Ordering::Relaxed));

    let eval = |&(r, e): &(usize, usize)| -> Result<CellResult> {
        if cancelled() {
            return Err(Error::Cancelled);
        }
        let res = run_cell(&ctx, config, e, r, es_axis[e], rho_axis[r]);
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        if let Some(progress) = control.progress {
            progress(k, total);
        }
        Ok(res)
    };
    let results: Vec<CellResult> = if control.parallel {
        cells.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        cells.iter().map(eval).collect::<Result<_>>()?
    };
    if cancelled() {
        return Err(Error::Cancelled);
    }

    let effect_surface: Vec<Option<f64>> = results.iter().map(|c| c.effect).collect();
    Ok(SensitivityGrid {
        effect_levels: effect_levels(&effect_surface, ctx.baseline.effect),
        missing: results.iter().map(|c| c.effect.is_none()).collect(),
        pvalue_surface: results.iter().map(|c| c.p).collect(),
        effect_mc_se: results.iter().map(|c| c.mc_se).collect(),
        effect_surface,
        observed_points: ctx.observed_points(),
        baseline: ctx.baseline,
        draws_per_cell: config.draws,
        algorithm: weights.algorithm,
        seed: config.seed,
        p_levels: P_LEVELS.to_vec(),
        es_axis,
        rho_axis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Estimand;

    fn setup(estimand: Estimand) -> (DesignMatrix, WeightSet, EffectEstimate, EngineConfig) {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t: Vec<bool> = (0..n)
            .map(|i| {
                let u: f64 = rand::Rng::random(&mut rng);
                u < stats::expit(0.8 * x[i])
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut rng);
                2.0 * f64::from(u8::from(t[i])) + x[i] - 0.5 * z[i] + e
            })
            .collect();
        let dm = DesignMatrix::from_columns(t, &[("x", x), ("z", z)], y, estimand).unwrap();
        let engine = EngineConfig::default();
        let ws = compute_weights(&dm, Algorithm::Lr, &engine).unwrap();
        let est = fit_doubly_robust(&dm, &ws).unwrap();
        (dm, ws, est, engine)
    }

    #[test]
    fn simulated_confounder_hits_targets() {
        let (dm, ws, est, engine) = setup(Estimand::Ate);
        let ctx = SensitivityContext::new(&dm, &ws, &est, &engine).unwrap();
        let u = ctx.simulate(0.5, 0.0, 11).unwrap();
        assert!((ctx.smd(&u).unwrap() - 0.5).abs() < TARGET_TOL);
        assert!(stats::correlation(&u, &ctx.resid_std).abs() < 0.02);
        let u = ctx.simulate(-0.4, 0.3, 12).unwrap();
        assert!((ctx.smd(&u).unwrap() + 0.4).abs() < TARGET_TOL);
        assert!((stats::correlation(&u, &ctx.resid_std) - 0.3).abs() < TARGET_TOL);
    }

    #[test]
    fn feasibility_is_symmetric_in_es() {
        for es in [0.0, 0.3, 0.9, 2.5, 6.0] {
            for rho in [0.0, 0.5, 0.9, 0.94] {
                assert_eq!(is_feasible(es, rho, 0.3), is_feasible(-es, rho, 0.3));
            }
        }
        assert!(!is_feasible(2.5, 0.9, 0.5));
        assert!(!is_feasible(0.0, 0.96, 0.5));
    }

    #[test]
    fn seeds_depend_on_every_index() {
        let s = cell_seed(1, 0, 0, 0);
        assert_ne!(s, cell_seed(2, 0, 0, 0));
        assert_ne!(s, cell_seed(1, 1, 0, 0));
        assert_ne!(s, cell_seed(1, 0, 1, 0));
        assert_ne!(s, cell_seed(1, 0, 0, 1));
        assert_ne!(cell_seed(1, 1, 0, 0), cell_seed(1, 0, 1, 0));
    }

    #[test]
    fn parallel_matches_sequential_and_cancel_works() {
        let (dm, ws, est, engine) = setup(Estimand::Att);
        let config = SensitivityConfig {
            grid: GridSpec {
                es_points: 3,
                rho_points: 2,
                ..GridSpec::default()
            },
            draws: 3,
            seed: 5,
        };
        let seq = sensitivity_grid(&dm, &ws, &est, &engine, &config, RunControl::default()).unwrap();
        let par = sensitivity_grid(
            &dm,
            &ws,
            &est,
            &engine,
            &config,
            RunControl {
                parallel: true,
                ..RunControl::default()
            },
        )
        .unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.effect_surface.len(), 6);
        assert_eq!(seq.observed_points.len(), 2);

        let cancel = AtomicBool::new(true);
        let res = sensitivity_grid(
            &dm,
            &ws,
            &est,
            &engine,
            &config,
            RunControl {
                cancel: Some(&cancel),
                ..RunControl::default()
            },
        );
        assert!(matches!(res, Err(Error::Cancelled)));
    }

    #[test]
    fn confounding_with_outcome_moves_effect_monotonically() {
        let (dm, ws, est, engine) = setup(Estimand::Ate);
        let config = SensitivityConfig {
            grid: GridSpec {
                es_min: 0.4,
                es_max: 0.4,
                es_points: 1,
                rho_min: 0.0,
                rho_max: 0.5,
                rho_points: 4,
            },
            draws: 5,
            seed: 3,
        };
        let grid = sensitivity_grid(&dm, &ws, &est, &engine, &config, RunControl::default()).unwrap();
        let e: Vec<f64> = grid.effect_surface.iter().map(|v| v.unwrap()).collect();
        for k in 1..e.len() {
            assert!(e[k] < e[k - 1], "{e:?}");
        }
    }
}
