use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use wbal_cli::{run, CliError, Overrides, RunConfig};

/// Runs a complete weighting analysis from a JSON config file.
#[derive(Debug, Parser)]
#[command(name = "wbal", version)]
struct Args {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides `output` in the config).
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Seed for example data and the sensitivity grid.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: one per core).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    if let Some(n) = args.workers {
        if n == 0 {
            return Err(CliError::Config(vec!["--workers: must be at least 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(vec![format!("--workers: {e}")]))?;
    }
    let mut cfg = RunConfig::load(&args.config)?;
    Overrides {
        output: args.output.clone(),
        seed: args.seed,
    }
    .apply(&mut cfg);
    let out = run(&cfg)?;
    if !args.quiet {
        let m = &out.manifest;
        println!(
            "{} effect: {:.3} using {} (recommended: {}); {} rows analysed",
            m.estimand,
            m.effect,
            m.chosen,
            m.recommended.as_deref().unwrap_or("none"),
            m.n_analysed
        );
        for f in &m.failures {
            println!("failed: {f}");
        }
        println!("artifacts written to {}", out.output.display());
    }
    Ok(())
}
