//! Per-session workflow state. Every mutation of an earlier step discards the
//! artifacts derived from it.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use wbal_core::balance::{build_balance_report, BalanceReport};
use wbal_core::data::{encode_design, model_formulas, AnalysisSpec, Dataset, DesignMatrix};
use wbal_core::outcome::{fit_doubly_robust, EffectEstimate};
use wbal_core::overlap::{apply_trims, TrimRule};
use wbal_core::pipeline::{resolve_choice, AlgorithmChoice, WeightingResult};
use wbal_core::report::{ReportContext, DEFAULT_TITLE};
use wbal_core::sensitivity::SensitivityGrid;
use wbal_core::data::{summarize, summarize_design};
use wbal_core::weights::{Algorithm, EngineConfig};

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Empty,
    DataLoaded,
    SpecSet,
    Trimmed,
    Weighted,
    Estimated,
    SensitivityDone,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Empty => "EMPTY",
            Stage::DataLoaded => "DATA_LOADED",
            Stage::SpecSet => "SPEC_SET",
            Stage::Trimmed => "TRIMMED",
            Stage::Weighted => "WEIGHTED",
            Stage::Estimated => "ESTIMATED",
            Stage::SensitivityDone => "SENSITIVITY_DONE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum JobStatus {
    Running { done: usize, total: usize },
    Done,
    Failed { message: String },
    Cancelled,
}

/// Progress counters shared with the worker running the grid.
#[derive(Debug)]
pub struct JobShared {
    pub done: AtomicUsize,
    pub total: usize,
    pub cancel: AtomicBool,
}

#[derive(Debug, Clone)]
pub struct SensitivityJob {
    pub id: String,
    pub generation: u64,
    pub shared: Arc<JobShared>,
    pub finished: Option<JobStatus>,
}

impl SensitivityJob {
    pub fn status(&self) -> JobStatus {
        match &self.finished {
            Some(s) => s.clone(),
            None => JobStatus::Running {
                done: self.shared.done.load(Ordering::Relaxed),
                total: self.shared.total,
            },
        }
    }
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub stage: Stage,
    /// Bumped by every mutation so background results for older inputs are
    /// discarded.
    pub generation: u64,
    pub created_at: SystemTime,
    pub last_touched: SystemTime,
    pub data: Option<Dataset>,
    pub spec: Option<AnalysisSpec>,
    pub full_design: Option<DesignMatrix>,
    pub trims: Vec<TrimRule>,
    pub removed_by_trim: Vec<usize>,
    pub design: Option<DesignMatrix>,
    pub engine: EngineConfig,
    pub weighting: Option<WeightingResult>,
    pub balance: Option<BalanceReport>,
    pub chosen: Option<Algorithm>,
    pub effect: Option<EffectEstimate>,
    pub sensitivity: Option<SensitivityGrid>,
    pub job: Option<SensitivityJob>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionStatus {
    pub id: String,
    pub stage: Stage,
    pub generation: u64,
    pub n_rows: Option<usize>,
    pub n_analysed: Option<usize>,
    pub computed_algorithms: Vec<Algorithm>,
    pub chosen_algorithm: Option<Algorithm>,
    pub effect: Option<f64>,
    pub has_sensitivity: bool,
    pub sensitivity_job: Option<JobStatus>,
}

impl Session {
    pub fn new(id: String) -> Self {
        let now = SystemTime::now();
        Session {
            id,
            stage: Stage::Empty,
            generation: 0,
            created_at: now,
            last_touched: now,
            data: None,
            spec: None,
            full_design: None,
            trims: Vec::new(),
            removed_by_trim: Vec::new(),
            design: None,
            engine: EngineConfig::default(),
            weighting: None,
            balance: None,
            chosen: None,
            effect: None,
            sensitivity: None,
            job: None,
        }
    }

    pub fn require(&self, stage: Stage) -> Result<(), ApiError> {
        if self.stage >= stage {
            Ok(())
        } else {
            Err(ApiError::Conflict {
                required: stage,
                current: self.stage,
            })
        }
    }

    pub fn touch(&mut self) {
        self.last_touched = SystemTime::now();
    }

    /// Drops every artifact produced after `stage` and moves the session
    /// there.
    fn reset_to(&mut self, stage: Stage) {
        self.generation += 1;
        if let Some(job) = self.job.take() {
            job.shared.cancel.store(true, Ordering::Relaxed);
        }
        self.sensitivity = None;
        if stage < Stage::Estimated {
            self.effect = None;
            self.chosen = None;
        }
        if stage < Stage::Weighted {
            self.weighting = None;
            self.balance = None;
        }
        if stage < Stage::Trimmed {
            self.trims.clear();
            self.removed_by_trim.clear();
            self.design = self.full_design.clone();
        }
        if stage < Stage::SpecSet {
            self.spec = None;
            self.full_design = None;
            self.design = None;
        }
        if stage < Stage::DataLoaded {
            self.data = None;
        }
        self.stage = stage;
    }

    pub fn load_data(&mut self, data: Dataset) {
        self.reset_to(Stage::DataLoaded);
        self.data = Some(data);
    }

    /// Encodes the design and returns the two model formulas.
    pub fn set_spec(&mut self, spec: AnalysisSpec) -> Result<(String, String), ApiError> {
        self.require(Stage::DataLoaded)?;
        let data = self.data.as_ref().expect("data present at DATA_LOADED");
        let design = encode_design(data, &spec)?;
        let formulas = model_formulas(&design);
        self.reset_to(Stage::SpecSet);
        self.spec = Some(spec);
        self.full_design = Some(design.clone());
        self.design = Some(design);
        Ok(formulas)
    }

    pub fn set_trims(&mut self, rules: Vec<TrimRule>) -> Result<(), ApiError> {
        self.require(Stage::SpecSet)?;
        let full = self.full_design.as_ref().expect("design present at SPEC_SET");
        let (design, removed) = apply_trims(full, &rules)?;
        self.reset_to(Stage::Trimmed);
        self.trims = rules;
        self.removed_by_trim = removed;
        self.design = Some(design);
        Ok(())
    }

    pub fn design(&self) -> Result<&DesignMatrix, ApiError> {
        self.require(Stage::SpecSet)?;
        Ok(self.design.as_ref().expect("design present at SPEC_SET"))
    }

    /// Stores weights computed for the current design. `generation` must
    /// match the one read before computing.
    pub fn store_weights(
        &mut self,
        generation: u64,
        engine: EngineConfig,
        weighting: WeightingResult,
    ) -> Result<&BalanceReport, ApiError> {
        if generation != self.generation {
            return Err(ApiError::unprocessable("the session changed while weights were computed"));
        }
        if weighting.weight_sets.is_empty() {
            let reasons: Vec<String> = weighting
                .failures
                .iter()
                .map(|f| format!("{}: {}", f.algorithm, f.message))
                .collect();
            return Err(ApiError::unprocessable(format!(
                "every weighting algorithm failed ({})",
                reasons.join("; ")
            )));
        }
        let design = self.design()?;
        let balance = build_balance_report(design, &weighting.weight_sets)?;
        self.reset_to(Stage::Weighted);
        self.engine = engine;
        self.weighting = Some(weighting);
        self.balance = Some(balance);
        Ok(self.balance.as_ref().expect("just stored"))
    }

    pub fn estimate(&mut self, choice: AlgorithmChoice) -> Result<&EffectEstimate, ApiError> {
        self.require(Stage::Weighted)?;
        let weighting = self.weighting.as_ref().expect("weights present at WEIGHTED");
        let balance = self.balance.as_ref().expect("balance present at WEIGHTED");
        let chosen = resolve_choice(choice, weighting, balance)?;
        let ws = weighting.get(chosen).expect("resolved choice is computed");
        let effect = fit_doubly_robust(self.design()?, ws)?;
        self.reset_to(Stage::Estimated);
        self.chosen = Some(chosen);
        self.effect = Some(effect);
        Ok(self.effect.as_ref().expect("just stored"))
    }

    /// Registers a new job, cancelling any earlier one and dropping an
    /// earlier grid.
    pub fn start_job(&mut self, total: usize) -> Result<SensitivityJob, ApiError> {
        self.require(Stage::Estimated)?;
        self.reset_to(Stage::Estimated);
        let job = SensitivityJob {
            id: uuid::Uuid::new_v4().to_string(),
            generation: self.generation,
            shared: Arc::new(JobShared {
                done: AtomicUsize::new(0),
                total,
                cancel: AtomicBool::new(false),
            }),
            finished: None,
        };
        self.job = Some(job.clone());
        Ok(job)
    }

    /// Records the outcome of job `id`. Results for a superseded or
    /// cancelled job are dropped.
    pub fn finish_job(&mut self, id: &str, result: wbal_core::Result<SensitivityGrid>) {
        let generation = self.generation;
        let Some(job) = self.job.as_mut().filter(|j| j.id == id && j.generation == generation) else {
            return;
        };
        if job.finished.is_some() {
            return;
        }
        match result {
            Ok(grid) if !job.shared.cancel.load(Ordering::Relaxed) => {
                job.finished = Some(JobStatus::Done);
                self.sensitivity = Some(grid);
                self.stage = Stage::SensitivityDone;
            }
            Ok(_) | Err(wbal_core::Error::Cancelled) => job.finished = Some(JobStatus::Cancelled),
            Err(e) => {
                job.finished = Some(JobStatus::Failed {
                    message: e.to_string(),
                })
            }
        }
    }

    pub fn cancel_job(&mut self) -> Result<(), ApiError> {
        let job = self
            .job
            .as_mut()
            .ok_or_else(|| ApiError::NotFound("no sensitivity job for this session".into()))?;
        if job.finished.is_none() {
            job.shared.cancel.store(true, Ordering::Relaxed);
            job.finished = Some(JobStatus::Cancelled);
        }
        Ok(())
    }

    pub fn status(&self) -> SessionStatus {
        SessionStatus {
            id: self.id.clone(),
            stage: self.stage,
            generation: self.generation,
            n_rows: self.data.as_ref().map(Dataset::n_rows),
            n_analysed: self.design.as_ref().map(DesignMatrix::n),
            computed_algorithms: self
                .weighting
                .as_ref()
                .map(|w| w.weight_sets.iter().map(|s| s.algorithm).collect())
                .unwrap_or_default(),
            chosen_algorithm: self.chosen,
            effect: self.effect.as_ref().map(|e| e.effect),
            has_sensitivity: self.sensitivity.is_some(),
            sensitivity_job: self.job.as_ref().map(SensitivityJob::status),
        }
    }

    pub fn report_context(&self) -> Result<ReportContext<'_>, ApiError> {
        self.require(Stage::Estimated)?;
        let data = self.data.as_ref().expect("data");
        let design = self.design.as_ref().expect("design");
        let full = self.full_design.as_ref().expect("design");
        let weighting = self.weighting.as_ref().expect("weights");
        Ok(ReportContext {
            title: DEFAULT_TITLE,
            data_summary: summarize(data, None)?,
            spec: self.spec.as_ref().expect("spec"),
            formulas: model_formulas(design),
            trims: &self.trims,
            removed_by_trim: self.removed_by_trim.len(),
            removed_missing: full.dropped_count(),
            n_original: data.n_rows(),
            final_summary: summarize_design(design),
            balance: self.balance.as_ref().expect("balance"),
            failures: &weighting.failures,
            chosen: self.chosen.expect("chosen"),
            effect: self.effect.as_ref().expect("effect"),
            sensitivity: self.sensitivity.as_ref(),
        })
    }
}
