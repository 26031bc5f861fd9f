//! `kerrcat` command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures. On failure `error.json` in the output directory names
//! the error and the module that raised it.

mod commands;
mod config;
mod plot;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::commands::Context;
use crate::config::{load_config, ConfigError};

#[derive(Parser)]
#[command(name = "kerrcat", version, about = "Kerr-cat generation and SNAIL device calibration")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// RNG seed for shot noise; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides `simulation.threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Mode parameters across a flux range and the Kerr-free points.
    FluxSweep,
    /// Kerr cat or odd/even cat generation with tomography.
    Cat,
    /// Single- and two-tone Kerr measurement.
    MeasureKerr,
    /// Cat fidelity under idle evolution.
    Preserve,
    /// Device fit to a flux curve, or photon-number calibration.
    Calibrate,
    /// Wigner function of a stored state.
    Wigner,
    /// Fidelity between stored Wigner grids or states.
    Fidelity,
}

#[derive(Serialize)]
struct ErrorReport {
    error: String,
    module: String,
    message: String,
    exit_code: u8,
}

fn classify(e: &anyhow::Error) -> (u8, String, String) {
    if e.downcast_ref::<ConfigError>().is_some() {
        return (2, "ConfigError".into(), "config".into());
    }
    for cause in e.chain() {
        if let Some(k) = cause.downcast_ref::<kerrcat::Error>() {
            let code = match k {
                kerrcat::Error::InvalidInput(_) | kerrcat::Error::InvalidLayout(_) => 2,
                _ => 3,
            };
            return (code, k.name().into(), k.module().into());
        }
    }
    (3, "Io".into(), "cli".into())
}

fn run(cli: &Cli, out: &Path) -> Result<()> {
    let cfg_path = cli.config.as_deref().ok_or_else(|| config::config_error("--config is required"))?;
    let mut cfg = load_config(cfg_path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads.or(cfg.simulation.threads) {
        if t == 0 {
            return Err(config::config_error("--threads must be > 0"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("starting thread pool")?;
    }
    let base = cfg_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ctx = Context { seed: cfg.seed, cfg, base, out: out.to_path_buf() };
    match cli.command {
        Command::FluxSweep => commands::flux_sweep(&ctx),
        Command::Cat => commands::cat(&ctx),
        Command::MeasureKerr => commands::measure_kerr(&ctx),
        Command::Preserve => commands::preserve(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
        Command::Wigner => commands::wigner(&ctx),
        Command::Fidelity => commands::fidelity(&ctx),
    }
}

/// Output directory: the flag, else `output.dir` from a config that parses,
/// else `out`.
fn output_dir(cli: &Cli) -> PathBuf {
    if let Some(o) = &cli.out {
        return o.clone();
    }
    cli.config
        .as_deref()
        .and_then(|p| load_config(p).ok())
        .and_then(|c| c.output.dir)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = output_dir(&cli);
    let result = commands::ensure_out(&out).and_then(|_| {
        let _ = std::fs::remove_file(out.join("error.json"));
        run(&cli, &out)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, name, module) = classify(&e);
            eprintln!("error [{module}/{name}]: {e:#}");
            let report = ErrorReport { error: name, module, message: format!("{e:#}"), exit_code: code };
            if let Ok(f) = File::create(out.join("error.json")) {
                let _ = kerrcat::io::write_json(f, &report);
            }
            ExitCode::from(code)
        }
    }
}
