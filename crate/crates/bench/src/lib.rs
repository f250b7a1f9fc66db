//! Experiment sweeps over random MJS models: identification error versus
//! horizon and noise, adaptive-control regret, and single end-to-end runs.
//!
//! Every task derives its seeds from the base seed and its grid position,
//! so results do not depend on scheduling or thread count.

pub mod config;
pub mod stats;

use std::io::Write;

use anyhow::{bail, Context, Result};
use mjs_core::adaptive::{adaptive_mjs_lqr, random_model, AdaptiveOptions, AdaptiveRunRecord, EpochSchedule};
use mjs_core::lqr::{infinite_horizon_avg_cost, lqr_controller, CostSpec};
use mjs_core::markov::stationary_distribution;
use mjs_core::mjs::{is_mss, simulate};
use mjs_core::model::{ModelDocument, MjsModel, ModeController, NoiseSpec};
use mjs_core::sysid::{estimation_error, mjs_sysid, mjs_sysid_known_b};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind};

pub const SYSID_HEADER: [&str; 13] = [
    "kind", "n", "p", "s", "sigma_w", "sigma_z", "T", "seed", "err_A", "err_B", "err_T", "rel_Psi", "samples_min",
];

pub const REGRET_HEADER: [&str; 15] = [
    "kind", "n", "p", "s", "sigma_w", "T0", "gamma", "epoch", "t", "seed", "regret", "err_A", "err_B", "err_T",
    "failed_cdare",
];

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `h₀ = splitmix64(base)`, `h_{k+1} = splitmix64(h_k ⊕ part_k)`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |h, &p| splitmix64(h ^ p))
}

const MODEL_STREAM: u64 = 0x6d6f_6465_6c;
const SIM_STREAM: u64 = 0x7369_6d;

/// Seeds of one task: the run seed reported in CSV output, and the model
/// and simulation seeds derived from it (or, with `shared_model`, a model
/// seed depending only on the replication and model dimensions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSeeds {
    pub run: u64,
    pub model: u64,
    pub sim: u64,
}

pub fn task_seeds(cfg: &ExperimentConfig, cell: &[u64], dims: &[u64], rep: usize) -> TaskSeeds {
    let mut parts = cell.to_vec();
    parts.push(rep as u64);
    let run = derive_seed(cfg.base_seed, &parts);
    let model = if cfg.shared_model {
        let mut parts = dims.to_vec();
        parts.extend([rep as u64, MODEL_STREAM]);
        derive_seed(cfg.base_seed, &parts)
    } else {
        derive_seed(run, &[MODEL_STREAM])
    };
    TaskSeeds {
        run,
        model,
        sim: derive_seed(run, &[SIM_STREAM]),
    }
}

/// The true model and cost for a task: the configured model file, or a
/// random draw.
pub fn load_or_draw(cfg: &ExperimentConfig, n: usize, p: usize, s: usize, seed: u64) -> Result<(MjsModel, CostSpec)> {
    match &cfg.model_file {
        Some(path) => read_model_file(path),
        None => Ok(random_model(n, p, s, cfg.spectral_cap, seed)?),
    }
}

/// Reads a model document; missing costs default to identity weights.
pub fn read_model_file(path: &std::path::Path) -> Result<(MjsModel, CostSpec)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let doc: ModelDocument = config::parse_json(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let model = doc.to_model()?;
    let cost = match doc.to_cost()? {
        Some(c) => c,
        None => CostSpec::uniform(
            DMatrix::identity(model.n(), model.n()),
            DMatrix::identity(model.p(), model.p()),
            model.s(),
        )?,
    };
    Ok((model, cost))
}

/// Grid dimensions in sweep order; a model file pins them.
fn dims(cfg: &ExperimentConfig) -> Result<Vec<(usize, usize, usize)>> {
    if let Some(path) = &cfg.model_file {
        let (m, _) = read_model_file(path)?;
        return Ok(vec![(m.n(), m.p(), m.s())]);
    }
    let mut out = Vec::new();
    for n in cfg.n.values() {
        for p in cfg.p.values() {
            for s in cfg.s.values() {
                out.push((n, p, s));
            }
        }
    }
    Ok(out)
}

fn stationary_or_uniform(model: &MjsModel) -> Vec<f64> {
    match stationary_distribution(model.chain()) {
        Ok(st) => st.pi.iter().copied().collect(),
        Err(_) => vec![1.0 / model.s() as f64; model.s()],
    }
}

/// One identification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SysidRow {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub sigma_w: f64,
    pub sigma_z: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    #[serde(rename = "err_A")]
    pub err_a: f64,
    #[serde(rename = "err_B")]
    pub err_b: f64,
    #[serde(rename = "err_T")]
    pub err_t: f64,
    #[serde(rename = "rel_Psi")]
    pub rel_psi: f64,
    pub samples_min: usize,
}

#[derive(Debug, Clone, Copy)]
struct SysidTask {
    cell: usize,
    n: usize,
    p: usize,
    s: usize,
    sigma_w: f64,
    sigma_z: f64,
    horizon: usize,
    rep: usize,
    cell_key: [u64; 4],
}

fn sysid_tasks(cfg: &ExperimentConfig) -> Result<(Vec<SysidTask>, usize)> {
    let mut tasks = Vec::new();
    let mut cell = 0;
    for (di, (n, p, s)) in dims(cfg)?.into_iter().enumerate() {
        for (wi, sigma_w) in cfg.sigma_w.values().into_iter().enumerate() {
            for (zi, sigma_z) in cfg.sigma_z.values().into_iter().enumerate() {
                for (ti, horizon) in cfg.horizons.values().into_iter().enumerate() {
                    for rep in 0..cfg.replications {
                        tasks.push(SysidTask {
                            cell,
                            n,
                            p,
                            s,
                            sigma_w,
                            sigma_z,
                            horizon,
                            rep,
                            cell_key: [di as u64, wi as u64, zi as u64, ti as u64],
                        });
                    }
                    cell += 1;
                }
            }
        }
    }
    Ok((tasks, cell))
}

fn run_sysid_task(cfg: &ExperimentConfig, task: &SysidTask) -> Result<SysidRow> {
    let seeds = task_seeds(cfg, &task.cell_key, &[task.n as u64, task.p as u64, task.s as u64], task.rep);
    let (model, _) = load_or_draw(cfg, task.n, task.p, task.s, seeds.model)?;
    let k = ModeController::zeros(&model);
    let sigma_z = if cfg.known_b { 0.0 } else { task.sigma_z };
    let noise = NoiseSpec::new(task.sigma_w, sigma_z)?;
    let traj = simulate(
        &model,
        &k,
        noise,
        &DVector::zeros(model.n()),
        &stationary_or_uniform(&model),
        task.horizon,
        seeds.sim,
    )?;
    let res = if cfg.known_b {
        mjs_sysid_known_b(&traj, &k, model.b(), noise, &cfg.sysid)?
    } else {
        mjs_sysid(&traj, &k, noise, &cfg.sysid)?
    };
    let err = estimation_error(&res, &model)?;
    Ok(SysidRow {
        n: model.n(),
        p: model.p(),
        s: model.s(),
        sigma_w: task.sigma_w,
        sigma_z,
        horizon: task.horizon,
        seed: seeds.run,
        err_a: err.err_a,
        err_b: err.err_b,
        err_t: err.err_t,
        rel_psi: err.rel_psi,
        samples_min: res.samples_min(),
    })
}

/// Raw rows of a sysid sweep, grouped by grid cell in sweep order.
pub fn run_sysid_sweep(cfg: &ExperimentConfig) -> Result<Vec<Vec<SysidRow>>> {
    cfg.validate()?;
    let (tasks, cells) = sysid_tasks(cfg)?;
    let rows: Vec<(usize, SysidRow)> = tasks
        .par_iter()
        .map(|t| run_sysid_task(cfg, t).map(|r| (t.cell, r)))
        .collect::<Result<_>>()?;
    let mut grouped = vec![Vec::new(); cells];
    for (cell, row) in rows {
        grouped[cell].push(row);
    }
    Ok(grouped)
}

/// One epoch boundary of one adaptive run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretRow {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub sigma_w: f64,
    #[serde(rename = "T0")]
    pub t0: usize,
    pub gamma: f64,
    pub epoch: usize,
    pub t: usize,
    pub seed: u64,
    pub regret: f64,
    #[serde(rename = "err_A")]
    pub err_a: Option<f64>,
    #[serde(rename = "err_B")]
    pub err_b: Option<f64>,
    #[serde(rename = "err_T")]
    pub err_t: Option<f64>,
    pub failed_cdare: bool,
}

#[derive(Debug, Clone, Copy)]
struct RegretTask {
    cell: usize,
    n: usize,
    p: usize,
    s: usize,
    sigma_w: f64,
    t0: usize,
    gamma: f64,
    rep: usize,
    cell_key: [u64; 4],
}

/// Runs one adaptive experiment on a model from the config.
pub fn adaptive_run(
    cfg: &ExperimentConfig,
    model: &MjsModel,
    cost: &CostSpec,
    sigma_w: f64,
    schedule: &EpochSchedule,
    seed: u64,
) -> Result<AdaptiveRunRecord> {
    Ok(adaptive_mjs_lqr(
        model,
        cost,
        sigma_w,
        &ModeController::zeros(model),
        schedule,
        &cfg.sysid,
        AdaptiveOptions {
            known_b: cfg.known_b,
            ..Default::default()
        },
        seed,
    )?)
}

fn run_regret_task(cfg: &ExperimentConfig, task: &RegretTask) -> Result<Vec<RegretRow>> {
    let seeds = task_seeds(cfg, &task.cell_key, &[task.n as u64, task.p as u64, task.s as u64], task.rep);
    let (model, cost) = load_or_draw(cfg, task.n, task.p, task.s, seeds.model)?;
    let schedule = EpochSchedule::new(task.t0, task.gamma, cfg.num_epochs)?;
    let rec = adaptive_run(cfg, &model, &cost, task.sigma_w, &schedule, seeds.sim)?;
    Ok(rec
        .epochs
        .iter()
        .zip(rec.regret_samples())
        .map(|(e, (t, regret))| RegretRow {
            n: model.n(),
            p: model.p(),
            s: model.s(),
            sigma_w: task.sigma_w,
            t0: task.t0,
            gamma: task.gamma,
            epoch: e.epoch,
            t,
            seed: seeds.run,
            regret,
            err_a: e.errors.map(|x| x.err_a),
            err_b: e.errors.map(|x| x.err_b),
            err_t: e.errors.map(|x| x.err_t),
            failed_cdare: e.cdare_failed,
        })
        .collect())
}

/// Raw rows of a regret sweep, grouped by grid cell; each group lists runs
/// in replication order, epochs in order within a run.
pub fn run_regret_sweep(cfg: &ExperimentConfig) -> Result<Vec<Vec<RegretRow>>> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    let mut cells = 0;
    for (di, (n, p, s)) in dims(cfg)?.into_iter().enumerate() {
        for (wi, sigma_w) in cfg.sigma_w.values().into_iter().enumerate() {
            for (ti, t0) in cfg.t0.values().into_iter().enumerate() {
                for (gi, gamma) in cfg.gamma.values().into_iter().enumerate() {
                    for rep in 0..cfg.replications {
                        tasks.push(RegretTask {
                            cell: cells,
                            n,
                            p,
                            s,
                            sigma_w,
                            t0,
                            gamma,
                            rep,
                            cell_key: [di as u64, wi as u64, ti as u64, gi as u64],
                        });
                    }
                    cells += 1;
                }
            }
        }
    }
    let rows: Vec<(usize, Vec<RegretRow>)> = tasks
        .par_iter()
        .map(|t| run_regret_task(cfg, t).map(|r| (t.cell, r)))
        .collect::<Result<_>>()?;
    let mut grouped = vec![Vec::new(); cells];
    for (cell, run) in rows {
        grouped[cell].extend(run);
    }
    Ok(grouped)
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

/// Writes raw rows followed by `median` and `iqr` rows per cell.
pub fn write_sysid_csv<W: Write>(out: W, cells: &[Vec<SysidRow>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SYSID_HEADER)?;
    for row in cells.iter().flatten() {
        w.write_record([
            "raw".to_string(),
            row.n.to_string(),
            row.p.to_string(),
            row.s.to_string(),
            fmt_f(row.sigma_w),
            fmt_f(row.sigma_z),
            row.horizon.to_string(),
            row.seed.to_string(),
            fmt_f(row.err_a),
            fmt_f(row.err_b),
            fmt_f(row.err_t),
            fmt_f(row.rel_psi),
            row.samples_min.to_string(),
        ])?;
    }
    for (kind, f) in [("median", stats::median as fn(&[f64]) -> f64), ("iqr", stats::iqr)] {
        for rows in cells.iter().filter(|c| !c.is_empty()) {
            let col = |g: fn(&SysidRow) -> f64| f(&rows.iter().map(g).collect::<Vec<_>>());
            let r = &rows[0];
            w.write_record([
                kind.to_string(),
                r.n.to_string(),
                r.p.to_string(),
                r.s.to_string(),
                fmt_f(r.sigma_w),
                fmt_f(r.sigma_z),
                r.horizon.to_string(),
                String::new(),
                fmt_f(col(|x| x.err_a)),
                fmt_f(col(|x| x.err_b)),
                fmt_f(col(|x| x.err_t)),
                fmt_f(col(|x| x.rel_psi)),
                fmt_f(col(|x| x.samples_min as f64)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes raw rows followed by `median` and `iqr` rows per cell and epoch.
/// Aggregate rows carry the number of failed syntheses in `failed_cdare`
/// and skip epochs without estimates in the error columns.
pub fn write_regret_csv<W: Write>(out: W, cells: &[Vec<RegretRow>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REGRET_HEADER)?;
    for row in cells.iter().flatten() {
        w.write_record([
            "raw".to_string(),
            row.n.to_string(),
            row.p.to_string(),
            row.s.to_string(),
            fmt_f(row.sigma_w),
            row.t0.to_string(),
            fmt_f(row.gamma),
            row.epoch.to_string(),
            row.t.to_string(),
            row.seed.to_string(),
            fmt_f(row.regret),
            fmt_opt(row.err_a),
            fmt_opt(row.err_b),
            fmt_opt(row.err_t),
            u8::from(row.failed_cdare).to_string(),
        ])?;
    }
    for (kind, f) in [("median", stats::median as fn(&[f64]) -> f64), ("iqr", stats::iqr)] {
        for rows in cells.iter().filter(|c| !c.is_empty()) {
            let epochs = rows.iter().map(|r| r.epoch).max().unwrap_or(0) + 1;
            for epoch in 0..epochs {
                let at: Vec<&RegretRow> = rows.iter().filter(|r| r.epoch == epoch).collect();
                let Some(r) = at.first() else { continue };
                let opt = |g: fn(&RegretRow) -> Option<f64>| {
                    let v: Vec<f64> = at.iter().filter_map(|x| g(x)).collect();
                    (!v.is_empty()).then(|| f(&v))
                };
                let failed = at.iter().filter(|x| x.failed_cdare).count();
                w.write_record([
                    kind.to_string(),
                    r.n.to_string(),
                    r.p.to_string(),
                    r.s.to_string(),
                    fmt_f(r.sigma_w),
                    r.t0.to_string(),
                    fmt_f(r.gamma),
                    epoch.to_string(),
                    r.t.to_string(),
                    String::new(),
                    fmt_f(f(&at.iter().map(|x| x.regret).collect::<Vec<_>>())),
                    fmt_opt(opt(|x| x.err_a)),
                    fmt_opt(opt(|x| x.err_b)),
                    fmt_opt(opt(|x| x.err_t)),
                    failed.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// End-to-end report of a single configuration.
#[derive(Debug, Serialize)]
pub struct SingleReport {
    pub model: ModelDocument,
    pub open_loop_rho: f64,
    pub mss: bool,
    #[serde(rename = "K_star")]
    pub k_star: ModeController,
    #[serde(rename = "J_star")]
    pub j_star: f64,
    pub sigma_w: f64,
    pub seed: u64,
    pub run: AdaptiveRunRecord,
}

/// Uses the first value of every grid.
pub fn run_single(cfg: &ExperimentConfig) -> Result<SingleReport> {
    cfg.validate()?;
    let first = |v: Vec<usize>, name: &str| v.first().copied().with_context(|| format!("empty grid {name}"));
    let (n, p, s) = (first(cfg.n.values(), "n")?, first(cfg.p.values(), "p")?, first(cfg.s.values(), "s")?);
    let sigma_w = cfg.sigma_w.values()[0];
    let schedule = EpochSchedule::new(cfg.t0.values()[0], cfg.gamma.values()[0], cfg.num_epochs)?;
    let seeds = task_seeds(cfg, &[], &[n as u64, p as u64, s as u64], 0);
    let (model, cost) = load_or_draw(cfg, n, p, s, seeds.model)?;
    let open = is_mss(&model, &ModeController::zeros(&model), 0.0)?;
    if !open.mss {
        bail!("the open loop is not mean-square stable (rho = {}); the adaptive run starts from K = 0", open.rho);
    }
    let k_star = lqr_controller(&model, &cost)?;
    let j_star = infinite_horizon_avg_cost(&model, &k_star, sigma_w, &cost)?;
    let run = adaptive_run(cfg, &model, &cost, sigma_w, &schedule, seeds.sim)?;
    Ok(SingleReport {
        model: ModelDocument::from_model(&model, Some(&cost)),
        open_loop_rho: open.rho,
        mss: open.mss,
        k_star,
        j_star,
        sigma_w,
        seed: seeds.run,
        run,
    })
}
