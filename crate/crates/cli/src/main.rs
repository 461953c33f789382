//! `hitlbm`: staged, resumable pipeline runner.
//!
//! Every invocation runs exactly one stage against one run directory (from
//! the config's `run.out_dir`). Stages read their inputs from the artifacts
//! earlier stages wrote there, so a full run is a sequence of invocations:
//!
//! ```text
//! hitlbm synth --config run.toml
//! hitlbm chunk --config run.toml
//! hitlbm cascade --config run.toml
//! hitlbm build-rating-data --config run.toml
//! hitlbm train-rating --config run.toml
//! hitlbm search --config run.toml
//! hitlbm fuse --config run.toml
//! hitlbm train-ctr --config run.toml
//! hitlbm evaluate --config run.toml
//! hitlbm ablate --config run.toml
//! ```
//!
//! A stage whose outputs already exist is a no-op unless `--force` is given.
//! Exit codes: 0 ok, 2 config error, 3 upstream artifact missing, 4 backend
//! or transport failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use hitlbm_core::pipeline::{
    run_stage, PipelineConfig, Stage, StageContext, StageOutcome,
};

#[derive(Parser)]
#[command(name = "hitlbm", version, about = "Staged lifelong-behavior modeling pipeline")]
struct Cli {
    /// Stage to run, or "validate-config" to echo the effective config.
    stage: String,
    /// Pipeline config file (TOML; missing keys fall back to defaults).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for per-user stage work; beats the config's run.workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Rerun the stage even when all its outputs exist.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(&cli))
}

fn run(cli: &Cli) -> u8 {
    let config = match PipelineConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("hitlbm: {e}");
            return 2;
        }
    };
    if cli.stage == "validate-config" {
        return validate_config(&config);
    }
    let Some(stage) = Stage::from_name(&cli.stage) else {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        eprintln!(
            "hitlbm: unknown stage \"{}\"; expected one of {}, or validate-config",
            cli.stage,
            names.join(", ")
        );
        return 2;
    };
    let ctx = StageContext::new(config, cli.workers, cli.force);
    if let Err(e) = std::fs::create_dir_all(&ctx.out_dir) {
        eprintln!("hitlbm: cannot create run dir {}: {e}", ctx.out_dir.display());
        return 1;
    }
    match run_stage(&ctx, stage) {
        Ok(StageOutcome::Ran) => {
            println!(
                "{stage}: wrote {} in {}",
                stage.outputs().join(", "),
                ctx.out_dir.display()
            );
            0
        }
        Ok(StageOutcome::UpToDate) => {
            println!("{stage}: outputs up to date, skipped (rerun with --force)");
            0
        }
        Err(e) => {
            eprintln!("hitlbm: {e}");
            u8::try_from(e.exit_code()).unwrap_or(1)
        }
    }
}

/// Ranges were already checked by `load`; what remains is writability of the
/// run directory and the echo itself.
fn validate_config(config: &PipelineConfig) -> u8 {
    if let Err(e) = ensure_writable(&config.run.out_dir) {
        eprintln!("hitlbm: {e}");
        return 2;
    }
    print!("{}", config.effective_toml());
    0
}

fn ensure_writable(dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir)
        .map_err(|e| format!("run dir {} cannot be created: {e}", dir.display()))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"ok")
        .map_err(|e| format!("run dir {} is not writable: {e}", dir.display()))?;
    let _ = std::fs::remove_file(&probe);
    Ok(())
}
