//! `dru`: generate biased samples, train robust regressors, check the
//! worst-case oracle and run the bias-removal sweep.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 usage or parse error,
//! 3 when more than a tenth of the sweep runs failed.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use manifest::{Command, Manifest};

#[derive(Debug, Parser)]
#[command(name = "dru", version, about = "Directional robust regression under biased sampling")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, env = "DRU_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, env = "DRU_OUT")]
    out: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true, env = "DRU_SEED")]
    seed: Option<u64>,
    /// Sweep worker threads; all cores by default.
    #[arg(long, global = true, env = "DRU_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a population, one biased sample per target and provenance files.
    Generate,
    /// Train the configured model on a sample CSV.
    Train {
        #[arg(long, env = "DRU_DATA")]
        data: PathBuf,
    },
    /// Compare greedy worst cases with the LP sup.
    Oracle,
    /// Run the replicate × subset × method sweep.
    Sweep,
    /// Repeat the command recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn execute(command: Command, cfg: &RunConfig, data: Option<&Path>, jobs: Option<usize>, out: &Path) -> Result<(), CliError> {
    prepare_out(out)?;
    let manifest = match command {
        Command::Generate => commands::generate(cfg, out)?,
        Command::Train => {
            let data = data.ok_or_else(|| CliError::Usage("train needs an input data file".into()))?;
            commands::train_model(cfg, data, out)?
        }
        Command::Oracle => commands::oracle(cfg, out)?,
        Command::Sweep => commands::sweep(cfg, jobs, out)?,
    };
    manifest.write(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Cmd::Rerun { manifest } = &cli.command {
        if cli.config.is_some() || cli.seed.is_some() {
            return Err(CliError::Usage("rerun takes its config and seed from the manifest".into()));
        }
        let m = Manifest::load(manifest)?;
        let out = match &cli.out {
            Some(o) => o.clone(),
            None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let data = m.inputs.first().map(|i| i.path.as_path());
        return execute(m.command, &m.config, data, cli.jobs, &out);
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let jobs = cli.jobs.or(cfg.jobs);
    if jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let cfg = cfg.resolve()?;
    match cli.command {
        Cmd::Generate => execute(Command::Generate, &cfg, None, jobs, &out),
        Cmd::Train { data } => execute(Command::Train, &cfg, Some(&data), jobs, &out),
        Cmd::Oracle => execute(Command::Oracle, &cfg, None, jobs, &out),
        Cmd::Sweep => execute(Command::Sweep, &cfg, None, jobs, &out),
        Cmd::Rerun { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
