use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arks_cli::config::{ExperimentConfig, Kind};
use arks_cli::error::{CliError, Result};
use arks_cli::{run, selftest};
use clap::{Args, Parser, Subcommand};

/// Kernel-smoothed robust training experiments.
#[derive(Parser)]
#[command(name = "arks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Paths {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method and report clean test metrics.
    Train(Paths),
    /// Attack or distribution-shift sweep.
    Sweep(Paths),
    /// Train ARKS models and emit robustness certificates.
    Certify(Paths),
    /// Robust least-squares trade-off experiment.
    Rls(Paths),
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write `selftest.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(paths: &Paths, allowed: &[Kind]) -> Result<()> {
    let cfg = ExperimentConfig::load(&paths.config)?;
    if !allowed.contains(&cfg.kind) {
        return Err(CliError::Config(format!(
            "config kind {:?} does not match this command (expected one of {allowed:?})",
            cfg.kind
        )));
    }
    let out = paths
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| {
            CliError::Config("no output directory: pass --out or set `output`".into())
        })?;
    let summary = run::run(&cfg, &out, paths.verbose)?;
    println!(
        "wrote {} training rows, {} evaluation rows, {} certificates to {}",
        summary.train.len(),
        summary.sweep.len(),
        summary.certificates.len(),
        out.display()
    );
    Ok(())
}

fn selftest(config: Option<&Path>, out: Option<&Path>) -> Result<bool> {
    if let Some(p) = config {
        let cfg = ExperimentConfig::load(p)?;
        if cfg.kind != Kind::Selftest {
            return Err(CliError::Config(format!(
                "config kind {:?} is not selftest",
                cfg.kind
            )));
        }
    }
    let results = selftest::run_all();
    let mut text = String::from("check,passed,total\n");
    for r in &results {
        let tag = if r.ok() { "PASS" } else { "FAIL" };
        println!("{tag} {} ({}/{})", r.name, r.passed, r.total);
        if let Some(d) = &r.detail {
            println!("     {d}");
        }
        text.push_str(&format!("{},{},{}\n", r.name, r.passed, r.total));
    }
    let ok = results.iter().filter(|r| r.ok()).count();
    println!("{ok}/{} checks passed", results.len());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("selftest.csv");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(ok == results.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Train(p) => experiment(p, &[Kind::Train]),
        Command::Sweep(p) => experiment(p, &[Kind::AttackSweep, Kind::ShiftSweep]),
        Command::Certify(p) => experiment(p, &[Kind::Certify]),
        Command::Rls(p) => experiment(p, &[Kind::Rls]),
        Command::Selftest { config, out } => match selftest(config.as_deref(), out.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
