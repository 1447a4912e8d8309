//! End-to-end orchestration shared by the command-line runner and the HTTP
//! service.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::balance::{build_balance_report, BalanceReport};
use crate::data::{encode_design, AnalysisSpec, Dataset, DesignMatrix};
use crate::error::{Error, Result};
use crate::outcome::{fit_doubly_robust, EffectEstimate};
use crate::overlap::{apply_trims, TrimRule};
use crate::sensitivity::{sensitivity_grid, RunControl, SensitivityConfig, SensitivityGrid};
use crate::weights::{compute_weights, fit_gbm_path, Algorithm, EngineConfig, StopRule, WeightSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineFailure {
    pub algorithm: Algorithm,
    pub message: String,
}

/// Weights from every engine that succeeded, in request order, plus the
/// failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingResult {
    pub weight_sets: Vec<WeightSet>,
    pub failures: Vec<EngineFailure>,
}

impl WeightingResult {
    pub fn get(&self, algorithm: Algorithm) -> Option<&WeightSet> {
        self.weight_sets.iter().find(|w| w.algorithm == algorithm)
    }
}

/// Runs the requested engines concurrently. Both GBM stopping rules share a
/// single boosting run.
pub fn compute_all_weights(dm: &DesignMatrix, algorithms: &[Algorithm], config: &EngineConfig) -> WeightingResult {
    let mut requested: Vec<Algorithm> = Vec::new();
    for &a in algorithms {
        if !requested.contains(&a) {
            requested.push(a);
        }
    }
    let both_gbm = requested.contains(&Algorithm::GbmEs) && requested.contains(&Algorithm::GbmKs);
    let jobs: Vec<Vec<Algorithm>> = requested
        .iter()
        .filter(|&&a| !(both_gbm && a == Algorithm::GbmKs))
        .map(|&a| {
            if both_gbm && a == Algorithm::GbmEs {
                vec![Algorithm::GbmEs, Algorithm::GbmKs]
            } else {
                vec![a]
            }
        })
        .collect();

    let estimand = dm.weighting_estimand();
    let results: Vec<(Algorithm, Result<WeightSet>)> = jobs
        .par_iter()
        .flat_map_iter(|job| -> Vec<(Algorithm, Result<WeightSet>)> {
            if job.len() == 2 {
                match fit_gbm_path(dm, estimand, &config.gbm) {
                    Ok(path) => [StopRule::MeanSmd, StopRule::MaxKs]
                        .into_iter()
                        .map(|rule| {
                            let ws = path.select(rule).into_weights(dm.treated(), estimand);
                            let checked = ws.validate(dm.treated()).map(|_| ws);
                            (rule.algorithm(), checked)
                        })
                        .collect(),
                    Err(e) => {
                        let msg = e.to_string();
                        vec![
                            (Algorithm::GbmEs, Err(e)),
                            (Algorithm::GbmKs, Err(Error::Numeric(msg))),
                        ]
                    }
                }
            } else {
                vec![(job[0], compute_weights(dm, job[0], config))]
            }
        })
        .collect();

    let mut weight_sets = Vec::new();
    let mut failures = Vec::new();
    for a in requested {
        if let Some((_, res)) = results.iter().find(|(b, _)| *b == a) {
            match res {
                Ok(ws) => weight_sets.push(ws.clone()),
                Err(e) => failures.push(EngineFailure {
                    algorithm: a,
                    message: e.to_string(),
                }),
            }
        }
    }
    WeightingResult {
        weight_sets,
        failures,
    }
}

/// Which weights feed the outcome model: a fixed algorithm or the balance
/// recommendation. Serialized as `"auto"` or an algorithm id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlgorithmChoice {
    #[default]
    Auto,
    Fixed(Algorithm),
}

impl fmt::Display for AlgorithmChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlgorithmChoice::Auto => f.write_str("auto"),
            AlgorithmChoice::Fixed(a) => write!(f, "{a}"),
        }
    }
}

impl FromStr for AlgorithmChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(AlgorithmChoice::Auto)
        } else {
            s.parse().map(AlgorithmChoice::Fixed)
        }
    }
}

impl Serialize for AlgorithmChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlgorithmChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Resolves `choice` against the computed weights and the recommendation.
pub fn resolve_choice(choice: AlgorithmChoice, weighting: &WeightingResult, balance: &BalanceReport) -> Result<Algorithm> {
    match choice {
        AlgorithmChoice::Auto => balance
            .recommended
            .ok_or_else(|| Error::InvalidInput("`auto` needs at least one computed algorithm".into())),
        AlgorithmChoice::Fixed(a) => {
            if weighting.get(a).is_some() {
                Ok(a)
            } else if let Some(f) = weighting.failures.iter().find(|f| f.algorithm == a) {
                Err(Error::InvalidInput(format!("weights for {a} failed: {}", f.message)))
            } else {
                Err(Error::InvalidInput(format!("weights for {a} were not computed")))
            }
        }
    }
}

/// Everything one analysis run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRequest {
    pub spec: AnalysisSpec,
    #[serde(default)]
    pub trims: Vec<TrimRule>,
    #[serde(default = "all_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub choice: AlgorithmChoice,
    #[serde(default)]
    pub sensitivity: Option<SensitivityConfig>,
}

pub fn all_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}

/// Artifacts of a complete analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub data: Dataset,
    pub request: AnalysisRequest,
    /// Complete cases before trimming.
    pub full_design: DesignMatrix,
    pub design: DesignMatrix,
    pub removed_by_trim: Vec<usize>,
    pub weighting: WeightingResult,
    pub balance: BalanceReport,
    pub chosen: Algorithm,
    pub effect: EffectEstimate,
    pub sensitivity: Option<SensitivityGrid>,
}

impl Analysis {
    pub fn chosen_weights(&self) -> &WeightSet {
        self.weighting.get(self.chosen).expect("chosen algorithm was computed")
    }
}

/// Encodes, trims, weights, evaluates balance, estimates the effect and,
/// when requested, runs the sensitivity grid.
pub fn run_analysis(data: Dataset, request: AnalysisRequest) -> Result<Analysis> {
    let full_design = encode_design(&data, &request.spec)?;
    let (design, removed_by_trim) = apply_trims(&full_design, &request.trims)?;
    if request.algorithms.is_empty() {
        return Err(Error::InvalidInput("no weighting algorithm selected".into()));
    }
    let weighting = compute_all_weights(&design, &request.algorithms, &request.engine);
    if weighting.weight_sets.is_empty() {
        let reasons: Vec<String> = weighting
            .failures
            .iter()
            .map(|f| format!("{}: {}", f.algorithm, f.message))
            .collect();
        return Err(Error::Numeric(format!("every weighting algorithm failed ({})", reasons.join("; "))));
    }
    let balance = build_balance_report(&design, &weighting.weight_sets)?;
    let chosen = resolve_choice(request.choice, &weighting, &balance)?;
    let weights = weighting.get(chosen).expect("resolved");
    let effect = fit_doubly_robust(&design, weights)?;
    let sensitivity = match &request.sensitivity {
        Some(cfg) => Some(sensitivity_grid(
            &design,
            weights,
            &effect,
            &request.engine,
            cfg,
            RunControl {
                parallel: true,
                ..RunControl::default()
            },
        )?),
        None => None,
    };
    Ok(Analysis {
        data,
        request,
        full_design,
        design,
        removed_by_trim,
        weighting,
        balance,
        chosen,
        effect,
        sensitivity,
    })
}
