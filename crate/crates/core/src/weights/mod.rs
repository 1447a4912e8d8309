//! Propensity-score and balancing-weight engines.
//!
//! Nine configurations are available, identified by the strings
//! `LR`, `CBPS1`–`CBPS3`, `GBM_ES`, `GBM_KS` and `EB1`–`EB3`. Every engine
//! works in the weighting orientation of the [`DesignMatrix`], so ATC runs
//! are ATT runs on flipped labels.

mod cbps;
mod entropy;
mod gbm;
mod logistic;
mod moments;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DesignMatrix, Estimand};
use crate::error::{Error, Result};

pub use cbps::{fit_cbps, CbpsObjective};
pub use entropy::{fit_entropy_balance, EntropyDual};
pub use gbm::{fit_gbm_path, fit_gbm_ps, GbmParams, GbmPath, StopRule};
pub use logistic::{fit_logistic, fit_logistic_ps, LogisticFit, LogisticOptions};
pub use moments::MomentExpansion;

/// Propensities are clipped to this distance from 0 and 1 before weights are
/// built.
pub const PS_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "CBPS1")]
    Cbps1,
    #[serde(rename = "CBPS2")]
    Cbps2,
    #[serde(rename = "CBPS3")]
    Cbps3,
    #[serde(rename = "GBM_ES")]
    GbmEs,
    #[serde(rename = "GBM_KS")]
    GbmKs,
    #[serde(rename = "EB1")]
    Eb1,
    #[serde(rename = "EB2")]
    Eb2,
    #[serde(rename = "EB3")]
    Eb3,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Lr,
        Algorithm::Cbps1,
        Algorithm::Cbps2,
        Algorithm::Cbps3,
        Algorithm::GbmEs,
        Algorithm::GbmKs,
        Algorithm::Eb1,
        Algorithm::Eb2,
        Algorithm::Eb3,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Lr => "LR",
            Algorithm::Cbps1 => "CBPS1",
            Algorithm::Cbps2 => "CBPS2",
            Algorithm::Cbps3 => "CBPS3",
            Algorithm::GbmEs => "GBM_ES",
            Algorithm::GbmKs => "GBM_KS",
            Algorithm::Eb1 => "EB1",
            Algorithm::Eb2 => "EB2",
            Algorithm::Eb3 => "EB3",
        }
    }

    /// Number of moments balanced by CBPS and EB configurations.
    pub fn moments(self) -> Option<usize> {
        match self {
            Algorithm::Cbps1 | Algorithm::Eb1 => Some(1),
            Algorithm::Cbps2 | Algorithm::Eb2 => Some(2),
            Algorithm::Cbps3 | Algorithm::Eb3 => Some(3),
            _ => None,
        }
    }

    pub fn is_entropy_balancing(self) -> bool {
        matches!(self, Algorithm::Eb1 | Algorithm::Eb2 | Algorithm::Eb3)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub chosen_gbm_trees: Option<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub dropped_columns: Vec<String>,
}

/// Estimated propensity scores, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityVector {
    pub p: Vec<f64>,
    pub source: Algorithm,
}

impl PropensityVector {
    /// Clips every score into `[PS_CLIP, 1 − PS_CLIP]`.
    pub fn new(p: Vec<f64>, source: Algorithm) -> Self {
        Self {
            p: p.into_iter().map(clip_propensity).collect(),
            source,
        }
    }
}

pub fn clip_propensity(p: f64) -> f64 {
    if p.is_nan() {
        return 0.5;
    }
    p.clamp(PS_CLIP, 1.0 - PS_CLIP)
}

/// A propensity model fit together with its convergence record.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub propensity: PropensityVector,
    pub diagnostics: Diagnostics,
}

impl PropensityFit {
    pub fn into_weights(self, treated: &[bool], estimand: Estimand) -> WeightSet {
        let w = ps_to_weights(&self.propensity, treated, estimand);
        WeightSet {
            w,
            algorithm: self.propensity.source,
            estimand: estimand.weighting(),
            diagnostics: self.diagnostics,
            propensity: Some(self.propensity.p),
        }
    }
}

/// One algorithm's per-row weights with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub w: Vec<f64>,
    pub algorithm: Algorithm,
    pub estimand: Estimand,
    pub diagnostics: Diagnostics,
    /// Propensity scores behind the weights, for score-based engines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<Vec<f64>>,
}

impl WeightSet {
    /// Checks non-negativity and positive total weight in both groups.
    pub fn validate(&self, treated: &[bool]) -> Result<()> {
        if self.w.len() != treated.len() {
            return Err(Error::InvalidInput("weight vector length mismatch".into()));
        }
        if self.w.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Numeric(format!("{} produced invalid weights", self.algorithm)));
        }
        let (mut s0, mut s1) = (0.0, 0.0);
        for (&w, &t) in self.w.iter().zip(treated) {
            if t {
                s1 += w;
            } else {
                s0 += w;
            }
        }
        if s0 <= 0.0 || s1 <= 0.0 {
            return Err(Error::Numeric(format!(
                "{} left a group with zero total weight",
                self.algorithm
            )));
        }
        Ok(())
    }
}

/// Inverse-probability weights: ATE `T/p + (1−T)/(1−p)`, ATT
/// `T + (1−T)·p/(1−p)`. ATC is handled as ATT on flipped labels.
pub fn ps_to_weights(ps: &PropensityVector, treated: &[bool], estimand: Estimand) -> Vec<f64> {
    ps.p
        .iter()
        .zip(treated)
        .map(|(&p, &t)| {
            let p = clip_propensity(p);
            match (estimand.weighting(), t) {
                (Estimand::Ate, true) => 1.0 / p,
                (Estimand::Ate, false) => 1.0 / (1.0 - p),
                (_, true) => 1.0,
                (_, false) => p / (1.0 - p),
            }
        })
        .collect()
}

/// Unit weights for the unweighted comparison column.
pub fn uniform_weights(dm: &DesignMatrix) -> Vec<f64> {
    vec![1.0; dm.n()]
}

/// Tuning shared by all engines.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub gbm: GbmParams,
}

/// Runs one configuration end to end.
pub fn compute_weights(dm: &DesignMatrix, algorithm: Algorithm, config: &EngineConfig) -> Result<WeightSet> {
    let estimand = dm.weighting_estimand();
    let ws = match algorithm {
        Algorithm::Lr => fit_logistic_ps(dm)?.into_weights(dm.treated(), estimand),
        Algorithm::Cbps1 | Algorithm::Cbps2 | Algorithm::Cbps3 => {
            fit_cbps(dm, algorithm.moments().unwrap(), estimand)?.into_weights(dm.treated(), estimand)
        }
        Algorithm::GbmEs => {
            fit_gbm_ps(dm, StopRule::MeanSmd, estimand, &config.gbm)?.into_weights(dm.treated(), estimand)
        }
        Algorithm::GbmKs => {
            fit_gbm_ps(dm, StopRule::MaxKs, estimand, &config.gbm)?.into_weights(dm.treated(), estimand)
        }
        Algorithm::Eb1 | Algorithm::Eb2 | Algorithm::Eb3 => {
            fit_entropy_balance(dm, algorithm.moments().unwrap(), estimand)?
        }
    };
    ws.validate(dm.treated())?;
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.id().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.id()));
        }
        assert!("EB4".parse::<Algorithm>().is_err());
    }

    #[test]
    fn half_propensity_ate_weights_are_two() {
        let ps = PropensityVector::new(vec![0.5; 4], Algorithm::Lr);
        let w = ps_to_weights(&ps, &[true, false, true, false], Estimand::Ate);
        assert_eq!(w, [2.0; 4]);
    }

    #[test]
    fn att_weights() {
        let ps = PropensityVector::new(vec![0.3, 0.8], Algorithm::Lr);
        let w = ps_to_weights(&ps, &[true, false], Estimand::Att);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_weights() {
        let ps = PropensityVector::new(vec![0.0, 1.0], Algorithm::Lr);
        let w = ps_to_weights(&ps, &[true, false], Estimand::Ate);
        assert!(w.iter().all(|w| w.is_finite()));
        assert!((w[0] - 1e6).abs() < 1e-3);
    }
}
