use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mjs_bench::{
    run_regret_sweep, run_single, run_sysid_sweep, write_regret_csv, write_sysid_csv, ExperimentConfig,
    ExperimentKind,
};

#[derive(Parser)]
#[command(name = "mjs-bench", version, about = "Benchmarks for Markov jump linear system identification and adaptive LQR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Identification error over a grid of dimensions, noise levels and horizons (CSV).
    SysidSweep(Common),
    /// Adaptive-control regret at epoch boundaries (CSV).
    RegretSweep(Common),
    /// One model, its optimal controller and one adaptive run (JSON).
    Single(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Without it the built-in defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replications per grid cell, overriding the config.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads; MJS_BENCH_JOBS takes precedence.
    #[arg(long)]
    jobs: Option<usize>,
}

fn jobs(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("MJS_BENCH_JOBS") {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v.trim().parse().with_context(|| format!("MJS_BENCH_JOBS={v} is not a count"))?;
            Ok(Some(n))
        }
        _ => Ok(flag),
    }
}

fn load(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = cfg.kind {
        if k != kind {
            bail!("config declares kind `{k}` but the `{kind}` command was run");
        }
    }
    Ok(cfg.with_overrides(common.seed, common.reps)?)
}

fn open_output(common: &Common, cfg: &ExperimentConfig) -> Result<Box<dyn Write>> {
    Ok(match common.out.as_ref().or(cfg.output.as_ref()) {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    let (common, kind) = match &cli.command {
        Command::SysidSweep(c) => (c, ExperimentKind::SysidSweep),
        Command::RegretSweep(c) => (c, ExperimentKind::RegretSweep),
        Command::Single(c) => (c, ExperimentKind::SingleRun),
    };
    let cfg = load(common, kind)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs(common.jobs)? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    let mut buf = Vec::new();
    pool.install(|| -> Result<()> {
        match kind {
            ExperimentKind::SysidSweep => write_sysid_csv(&mut buf, &run_sysid_sweep(&cfg)?),
            ExperimentKind::RegretSweep => write_regret_csv(&mut buf, &run_regret_sweep(&cfg)?),
            ExperimentKind::SingleRun => {
                serde_json::to_writer_pretty(&mut buf, &run_single(&cfg)?)?;
                buf.push(b'\n');
                Ok(())
            }
        }
    })?;
    let mut out = open_output(common, &cfg)?;
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
