//! Headless runner: reads a [`RunConfig`], runs the whole analysis and
//! writes the report, exports and a manifest into one directory.

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use wbal_core::data::{load_csv, write_csv, Separator};
use wbal_core::example::generate_example_dataset;
use wbal_core::outcome::export_data_and_weights;
use wbal_core::pipeline::{run_analysis, Analysis, AnalysisRequest};
use wbal_core::report::{render_report, ReportContext};
use wbal_core::Error;

pub use config::RunConfig;

pub const REPORT_FILE: &str = "report.html";
pub const EXPORT_FILE: &str = "data_weights.csv";
pub const BALANCE_FILE: &str = "balance.json";
pub const EFFECT_FILE: &str = "effect.json";
pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    /// One message per offending config entry, each prefixed by its path.
    Config(Vec<String>),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msgs) => {
                writeln!(f, "config error:")?;
                for m in msgs {
                    writeln!(f, "  {m}")?;
                }
                Ok(())
            }
            CliError::Data(m) => writeln!(f, "data error: {m}"),
            CliError::Numeric(m) => writeln!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(fields) => {
                CliError::Config(fields.iter().map(|f| format!("spec.{}: {}", f.field, f.message)).collect())
            }
            Error::UnknownColumn(c) => CliError::Config(vec![format!("spec: unknown column `{c}`")]),
            Error::InvalidInput(m) => CliError::Config(vec![m]),
            Error::Parse { .. }
            | Error::EmptyData
            | Error::Schema(_)
            | Error::MultiGroup { .. }
            | Error::DegenerateColumn(_)
            | Error::EmptyGroup(_) => CliError::Data(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub example: Option<u64>,
    pub sensitivity: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to reproduce and audit a run. Contains no timestamps
/// or host details, so equal runs give equal manifests.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub input: String,
    pub input_sha256: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub algorithms: Vec<String>,
    pub failures: Vec<String>,
    pub recommended: Option<String>,
    pub chosen: String,
    pub estimand: String,
    pub effect: f64,
    pub n_analysed: usize,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    /// Replaces the example-data seed and the sensitivity seed.
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(out) = &self.output {
            cfg.output = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            if let Some(ex) = &mut cfg.example {
                ex.seed = seed;
            }
            cfg.sensitivity.seed = seed;
        }
    }
}

pub struct RunOutcome {
    pub analysis: Analysis,
    pub manifest: Manifest,
    pub output: PathBuf,
}

fn load_input(cfg: &RunConfig) -> Result<(wbal_core::data::Dataset, String, Vec<u8>), CliError> {
    if let Some(ex) = &cfg.example {
        let data = generate_example_dataset(ex.seed, ex.n_per_group).map_err(|e| match e {
            Error::InvalidInput(m) => CliError::Config(vec![format!("example: {m}")]),
            other => other.into(),
        })?;
        let bytes = write_csv(&data, Separator::Comma);
        let label = format!("example(seed={}, n_per_group={})", ex.seed, ex.n_per_group);
        return Ok((data, label, bytes));
    }
    let path = cfg.input_path.as_ref().expect("validated");
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let data = load_csv(&bytes, &cfg.parse)?;
    let label = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((data, label, bytes))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], artifacts: &mut Vec<Artifact>) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| CliError::Config(vec![format!("output: {}: {e}", path.display())]))?;
    artifacts.push(Artifact {
        file: name.to_string(),
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

/// Runs the analysis described by `cfg` and writes all artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Config(vec!["output: no output directory; set output or pass --output".into()]))?;
    let (data, input, input_bytes) = load_input(cfg)?;

    let request = AnalysisRequest {
        spec: cfg.spec.clone(),
        trims: cfg.trims.clone(),
        algorithms: cfg.algorithms.clone(),
        engine: cfg.engine.clone(),
        choice: cfg.choice,
        sensitivity: cfg.sensitivity.config(),
    };
    let analysis = run_analysis(data, request)?;

    std::fs::create_dir_all(&output)
        .map_err(|e| CliError::Config(vec![format!("output: {}: {e}", output.display())]))?;
    let mut artifacts = Vec::new();
    let mut ctx = ReportContext::from_analysis(&analysis);
    if let Some(title) = &cfg.title {
        ctx.title = title;
    }
    write_file(&output, REPORT_FILE, render_report(&ctx).as_bytes(), &mut artifacts)?;
    let export = export_data_and_weights(
        &analysis.data,
        &analysis.design,
        &analysis.weighting.weight_sets,
        Separator::Comma,
    )?;
    write_file(&output, EXPORT_FILE, &export, &mut artifacts)?;
    write_file(&output, BALANCE_FILE, &pretty(&analysis.balance), &mut artifacts)?;
    write_file(&output, EFFECT_FILE, &pretty(&analysis.effect), &mut artifacts)?;
    if let Some(grid) = &analysis.sensitivity {
        write_file(&output, SENSITIVITY_FILE, &pretty(grid), &mut artifacts)?;
    }

    // Output location is excluded so that runs into different directories
    // remain comparable.
    let mut hashed = cfg.clone();
    hashed.output = None;
    let manifest = Manifest {
        tool: "wbal".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: wbal_core::VERSION.into(),
        input,
        input_sha256: sha256_hex(&input_bytes),
        config_sha256: sha256_hex(&serde_json::to_vec(&hashed).expect("serializable")),
        seeds: Seeds {
            example: cfg.example.as_ref().map(|e| e.seed),
            sensitivity: cfg.sensitivity.enabled.then_some(cfg.sensitivity.seed),
        },
        algorithms: analysis.weighting.weight_sets.iter().map(|w| w.algorithm.to_string()).collect(),
        failures: analysis
            .weighting
            .failures
            .iter()
            .map(|f| format!("{}: {}", f.algorithm, f.message))
            .collect(),
        recommended: analysis.balance.recommended.map(|a| a.to_string()),
        chosen: analysis.chosen.to_string(),
        estimand: analysis.effect.estimand.to_string(),
        effect: analysis.effect.effect,
        n_analysed: analysis.design.n(),
        artifacts,
    };
    std::fs::write(output.join(MANIFEST_FILE), pretty(&manifest))
        .map_err(|e| CliError::Config(vec![format!("output: {e}")]))?;
    Ok(RunOutcome {
        analysis,
        manifest,
        output,
    })
}
