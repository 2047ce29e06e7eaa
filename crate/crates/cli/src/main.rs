//! `wkam`: weak KAM computations driven by JSON run configurations.
//!
//! Exit codes: 0 on success, 2 for a bad configuration or parameter, 3 for a
//! numerical failure (diagnostics are written next to the outputs).

mod commands;
mod config;
mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::RunConfig;
use run::Run;

#[derive(Parser)]
#[command(name = "wkam", version, about = "Weak KAM and Aubry-Mather computations on flat tori and the Heisenberg nilmanifold")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON); not needed for `report`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Kernel cache directory; overrides `cache_dir` from the config.
    #[arg(long, global = true, env = "WKAM_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Carnot–Carathéodory distance between `params.from` and `params.to`.
    CcDist,
    /// Minimal action and minimizer between `params.from` and `params.to`.
    MinimalAction,
    /// Builds (or reuses) the short-time kernel.
    KernelBuild,
    /// Critical value and weak KAM solution.
    Critical,
    /// Discounted value functions for every discount in `lambdas`.
    Discounted,
    /// `u_λ + c/λ` along `lambdas` and the limit candidate.
    VanishingDiscount,
    /// Long-time Lax–Oleinik evolution.
    LoEvolve,
    /// Peierls barrier and Mañé potential from `params.source`.
    Barrier,
    /// Aubry set mask.
    Aubry,
    /// Domination, calibration, viscosity and energy checks of `params.function`.
    Check,
    /// Mather measure from the occupation LP.
    MatherLp,
    /// Table of the effective Lagrangian.
    Beta,
    /// Effective Hamiltonian at `params.classes`.
    EffectiveH,
    /// Homogenization gaps at `params.probes`.
    Homogenize,
    /// Consolidated tables and plot script for the runs in the output directory.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::CcDist => "cc-dist",
            Command::MinimalAction => "minimal-action",
            Command::KernelBuild => "kernel-build",
            Command::Critical => "critical",
            Command::Discounted => "discounted",
            Command::VanishingDiscount => "vanishing-discount",
            Command::LoEvolve => "lo-evolve",
            Command::Barrier => "barrier",
            Command::Aubry => "aubry",
            Command::Check => "check",
            Command::MatherLp => "mather-lp",
            Command::Beta => "beta",
            Command::EffectiveH => "effective-h",
            Command::Homogenize => "homogenize",
            Command::Report => "report",
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Numerical(anyhow::Error, PathBuf),
}

fn is_input_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<wkam::Error>(),
        Some(wkam::Error::InvalidInput(_) | wkam::Error::GridMismatch(_) | wkam::Error::Format(_))
    )
}

fn prepare(cli: &Cli) -> anyhow::Result<Run> {
    let name = cli.command.name();
    let (mut cfg, manifests_out) = match (&cli.config, cli.command) {
        (Some(path), _) => (RunConfig::load(path)?, None),
        (None, Command::Report) => {
            let out = cli.out.clone().context("`report` needs --out or --config")?;
            let manifests = report::load_manifests(&out)?;
            let first = manifests.first().with_context(|| format!("no completed runs in {}", out.display()))?;
            (first.config.clone(), Some(out))
        }
        (None, _) => anyhow::bail!("--config is required for `{name}`"),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or(manifests_out)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("wkam-out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cache = cli.cache_dir.clone().or_else(|| cfg.cache_dir.clone()).unwrap_or_else(|| out.join("cache"));
    cfg.out_dir = Some(out.clone());
    cfg.cache_dir = Some(cache.clone());
    let hash = wkam::config::config_hash(&cfg)?;
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(Run::new(name, out, cache, cfg, hash, workers))
}

fn execute(cli: &Cli, run: &mut Run) -> anyhow::Result<()> {
    match cli.command {
        Command::CcDist => commands::cc_dist(run),
        Command::MinimalAction => commands::minimal_action(run),
        Command::KernelBuild => commands::kernel_build(run),
        Command::Critical => commands::critical_cmd(run),
        Command::Discounted => commands::discounted(run),
        Command::VanishingDiscount => commands::vanishing(run),
        Command::LoEvolve => commands::lo_evolve(run),
        Command::Barrier => commands::barrier(run),
        Command::Aubry => commands::aubry(run),
        Command::Check => commands::check(run),
        Command::MatherLp => commands::mather_lp(run),
        Command::Beta => commands::beta(run),
        Command::EffectiveH => commands::effective_h(run),
        Command::Homogenize => commands::homogenize_cmd(run),
        Command::Report => {
            let manifests = report::load_manifests(&run.out)?;
            report::report(run, &manifests)
        }
    }
}

fn write_diagnostics(out: &Path, name: &str, err: &anyhow::Error) -> PathBuf {
    let path = out.join(format!("{name}.diagnostics.txt"));
    let text = format!("command: {name}\nerror: {err:#}\n\n{err:?}\n");
    if std::fs::write(&path, text).is_err() {
        return PathBuf::from("<unwritable>");
    }
    path
}

fn main_inner(cli: &Cli) -> Result<(), Failure> {
    let mut run = prepare(cli).map_err(Failure::Config)?;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(run.workers).build_global() {
        return Err(Failure::Config(anyhow::anyhow!("worker pool: {e}")));
    }
    match execute(cli, &mut run) {
        Ok(()) => {}
        Err(e) if is_input_error(&e) => return Err(Failure::Config(e)),
        Err(e) => {
            let path = write_diagnostics(&run.out, &run.command, &e);
            return Err(Failure::Numerical(e, path));
        }
    }
    let out = run.out.clone();
    let name = run.command.clone();
    match run.finish() {
        Ok(m) => {
            println!("{}", serde_json::to_string_pretty(&m.headline).unwrap_or_default());
            Ok(())
        }
        Err(e) => {
            let path = write_diagnostics(&out, &name, &e);
            Err(Failure::Numerical(e, path))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e, path)) => {
            eprintln!("error: {e:#}\ndiagnostics: {}", path.display());
            ExitCode::from(3)
        }
    }
}
