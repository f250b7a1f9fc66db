//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use mjs_bench::stats::{log_log_slope, median};
use mjs_bench::{run_regret_sweep, run_sysid_sweep, ExperimentConfig, RegretRow, SysidRow};
use mjs_core::adaptive::random_model;
use mjs_core::linalg::spectral_norm;
use mjs_core::lqr::{finite_horizon_cost, infinite_horizon_avg_cost, lqr_controller, optimal_controller, solve_cdare};
use mjs_core::mjs::{covariance_recursion, initial_covariances, is_mss, rollout};
use mjs_core::sysid::{mjs_sysid, SysidConfig};
use mjs_core::{CostSpec, MarkovChain, MjsModel, ModeController, NoiseSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn scalar_pair(a0: f64, a1: f64, t: [[f64; 2]; 2]) -> MjsModel {
    let chain = MarkovChain::from_rows(&[t[0].to_vec(), t[1].to_vec()]).unwrap();
    MjsModel::autonomous(vec![DMatrix::from_element(1, 1, a0), DMatrix::from_element(1, 1, a1)], chain).unwrap()
}

fn mss_certification() -> Outcome {
    let fig = scalar_pair(1.2, 0.7, [[0.6, 0.4], [0.3, 0.7]]);
    let counter = scalar_pair(2.0, 0.5, [[0.1, 0.9], [0.1, 0.9]]);
    let mut slowest = Duration::ZERO;
    let mut check = |m: &MjsModel| {
        let start = Instant::now();
        let r = is_mss(m, &ModeController::zeros(m), 0.0).unwrap();
        slowest = slowest.max(start.elapsed());
        r
    };
    let a = check(&fig);
    let b = check(&counter);
    let pass = a.mss
        && (a.rho - 0.9941).abs() <= 1e-3
        && b.mss
        && (b.rho - 0.625).abs() <= 1e-6
        && slowest < Duration::from_millis(1);
    outcome(
        pass,
        format!("rho = {:.6} and {:.9}, slowest check {:?}", a.rho, b.rho, slowest),
    )
}

/// Plain-array simulator used only as a Monte-Carlo reference.
struct Reference {
    a: Vec<[[f64; 2]; 2]>,
    b: Vec<[f64; 2]>,
    k: Vec<[f64; 2]>,
    t: [[f64; 2]; 2],
}

impl Reference {
    fn from_model(model: &MjsModel, k: &ModeController) -> Self {
        Self {
            a: model.a().iter().map(|m| [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]).collect(),
            b: model.b().iter().map(|m| [m[(0, 0)], m[(1, 0)]]).collect(),
            k: k.gains().iter().map(|g| [g[(0, 0)], g[(0, 1)]]).collect(),
            t: [
                [model.chain().prob(0, 0), model.chain().prob(0, 1)],
                [model.chain().prob(1, 0), model.chain().prob(1, 1)],
            ],
        }
    }

    /// Accumulates `x_a x_b 1{ω = i}` and its square at the requested times.
    fn moments(&self, x0: [f64; 2], sigma: f64, times: &[usize], reps: usize, seed: u64) -> Vec<[(f64, f64); 8]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = *times.iter().max().unwrap();
        let mut acc = vec![[(0.0, 0.0); 8]; times.len()];
        for _ in 0..reps {
            let mut x = x0;
            let mut m = usize::from(rng.random::<f64>() >= 0.5);
            for t in 0..=horizon {
                if let Some(slot) = times.iter().position(|&s| s == t) {
                    for a in 0..2 {
                        for b in 0..2 {
                            let v = x[a] * x[b];
                            let e = &mut acc[slot][m * 4 + a + 2 * b];
                            e.0 += v;
                            e.1 += v * v;
                        }
                    }
                }
                let z: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
                let u = self.k[m][0] * x[0] + self.k[m][1] * x[1] + z;
                let w0: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
                let w1: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
                let a = &self.a[m];
                x = [
                    a[0][0] * x[0] + a[0][1] * x[1] + self.b[m][0] * u + w0,
                    a[1][0] * x[0] + a[1][1] * x[1] + self.b[m][1] * u + w1,
                ];
                m = usize::from(rng.random::<f64>() >= self.t[m][0]);
            }
        }
        acc
    }
}

fn covariance_oracle() -> Outcome {
    let start = Instant::now();
    let times = [1, 5, 10, 20];
    let reps = 100_000;
    let sigma = 0.1;
    let x0 = [0.3, -0.2];
    let mut worst: f64 = 0.0;
    let mut models = 0;
    let mut seed = 0;
    while models < 5 {
        seed += 1;
        let (model, _) = random_model(2, 1, 2, 0.8, 500 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = ModeController::new(
            (0..2).map(|_| DMatrix::from_fn(1, 2, |_, _| 0.4 * (rng.random::<f64>() - 0.5))).collect(),
        );
        if !is_mss(&model, &k, 0.0).unwrap().mss {
            continue;
        }
        models += 1;
        let x0v = DVector::from_column_slice(&x0);
        let exact = covariance_recursion(
            &model,
            &k,
            NoiseSpec::new(sigma, sigma).unwrap(),
            &initial_covariances(&(&x0v * x0v.transpose()), &[0.5, 0.5]),
            &[0.5, 0.5],
            20,
        )
        .unwrap();
        let mc = Reference::from_model(&model, &k).moments(x0, sigma, &times, reps, 1000 + seed);
        for (slot, &t) in times.iter().enumerate() {
            let s = exact.stacked(t);
            for c in 0..8 {
                let (sum, sq) = mc[slot][c];
                let mean = sum / reps as f64;
                let se = ((sq / reps as f64 - mean * mean) / reps as f64).sqrt();
                worst = worst.max((mean - s[c]).abs() / se);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 5.0 && elapsed < Duration::from_secs(60),
        format!("worst deviation {worst:.2} standard errors over 5 models, {elapsed:.1?}"),
    )
}

fn scalar_truths() -> Outcome {
    let start = Instant::now();
    let scalar = |a: f64, b: f64| {
        MjsModel::new(vec![DMatrix::from_element(1, 1, a)], vec![DMatrix::from_element(1, 1, b)], MarkovChain::single())
            .unwrap()
    };
    let one = CostSpec::uniform(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 1).unwrap();
    let ar = scalar(0.5, 0.0);
    let k0 = ModeController::zeros(&ar);
    let j = infinite_horizon_avg_cost(&ar, &k0, 1.0, &one).unwrap();
    let f = finite_horizon_cost(&ar, &k0, NoiseSpec::new(1.0, 0.0).unwrap(), &DVector::zeros(1), &[1.0], &one, 200)
        .unwrap()
        / 200.0;
    let p_ar = solve_cdare(&ar, &one, 1e-12, 10_000).unwrap().p[0][(0, 0)];
    let unit = scalar(1.0, 1.0);
    let sol = solve_cdare(&unit, &one, 1e-12, 10_000).unwrap();
    let k = optimal_controller(&unit, &one, &sol).unwrap().gain(0)[(0, 0)];
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let p = sol.p[0][(0, 0)];
    let elapsed = start.elapsed();
    let pass = (j - 4.0 / 3.0).abs() <= 1e-9
        && (f - 4.0 / 3.0).abs() <= 0.01 * 4.0 / 3.0
        && (p_ar - 4.0 / 3.0).abs() <= 1e-8
        && (p - golden).abs() <= 1e-8
        && (k + golden / (1.0 + golden)).abs() <= 1e-8
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!("J = {j:.12}, T-avg = {f:.6}, P = {p_ar:.10} / {p:.10}, K = {k:.10}, {elapsed:.1?}"),
    )
}

fn noiseless_identification() -> Outcome {
    let start = Instant::now();
    let (model, _) = random_model(4, 2, 3, 0.5, 31).unwrap();
    let (n, p, s) = (model.n(), model.p(), model.s());
    let k = ModeController::new((0..s).map(|i| DMatrix::from_fn(p, n, |r, c| 0.1 * ((r + 2 * c + i) % 3) as f64 - 0.1)).collect());
    let horizon = 90;
    let modes: Vec<usize> = (0..=horizon).map(|t| (t + t / 4) % s).collect();
    let z: Vec<DVector<f64>> = (0..horizon)
        .map(|t| DVector::from_fn(p, |i, _| if i == t % p { 1.0 + (t % 5) as f64 * 0.3 } else { -0.2 }))
        .collect();
    let w = vec![DVector::zeros(n); horizon];
    let x0 = DVector::from_fn(n, |i, _| (i + 1) as f64);
    let traj = rollout(&model, &k, &x0, &modes, &z, &w).unwrap();
    let res = mjs_sysid(&traj, &k, NoiseSpec::new(1.0, 1.0).unwrap(), &SysidConfig::unclipped()).unwrap();
    let err = (0..s)
        .map(|i| {
            spectral_norm(&(&res.a_hat[i] - &model.a()[i])).max(spectral_norm(&(&res.b_hat[i] - &model.b()[i])))
        })
        .fold(0.0, f64::max);
    let enough = res.samples_per_mode.iter().all(|&c| c >= n + p);
    let elapsed = start.elapsed();
    outcome(
        enough && err <= 1e-9 && elapsed < Duration::from_secs(1),
        format!("max error {err:.2e}, samples per mode {:?}, {elapsed:.1?}", res.samples_per_mode),
    )
}

fn identification_trend() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_json(
        r#"{"n": 5, "p": 3, "s": 5, "sigma_w": 0.01, "sigma_z": 0.01, "T": [4000, 16000, 64000],
            "replications": 10, "base_seed": 2024, "shared_model": true}"#,
    )
    .unwrap();
    let cells = run_sysid_sweep(&cfg).unwrap();
    let med = |rows: &Vec<SysidRow>, f: fn(&SysidRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let psi: Vec<f64> = cells.iter().map(|c| med(c, |r| r.rel_psi)).collect();
    let t_err: Vec<f64> = cells.iter().map(|c| med(c, |r| r.err_t)).collect();
    let horizons = [4000.0, 16000.0, 64000.0];
    let slope = log_log_slope(&horizons.iter().copied().zip(psi.iter().copied()).collect::<Vec<_>>()).unwrap();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let elapsed = start.elapsed();
    outcome(
        decreasing(&psi) && decreasing(&t_err) && (-0.75..=-0.30).contains(&slope) && elapsed < Duration::from_secs(600),
        format!("median rel error {psi:.4?} (slope {slope:.3}), median T error {t_err:.4?}, {elapsed:.1?}"),
    )
}

fn optimality_spot_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_gap = f64::INFINITY;
    for seed in 0..5 {
        let (model, cost) = random_model(3, 2, 3, 0.5, 600 + seed).unwrap();
        let k_star = lqr_controller(&model, &cost).unwrap();
        let j_star = infinite_horizon_avg_cost(&model, &k_star, 1.0, &cost).unwrap();
        let mut tested = 0;
        while tested < 20 {
            let perturbed = ModeController::new(
                k_star
                    .gains()
                    .iter()
                    .map(|g| {
                        let d = DMatrix::from_fn(g.nrows(), g.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
                        g + &d * (0.05 / spectral_norm(&d))
                    })
                    .collect(),
            );
            if !is_mss(&model, &perturbed, 0.0).unwrap().mss {
                continue;
            }
            tested += 1;
            let j = infinite_horizon_avg_cost(&model, &perturbed, 1.0, &cost).unwrap();
            worst_gap = worst_gap.min(j - j_star);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_gap >= 0.0 && elapsed < Duration::from_secs(30),
        format!("smallest J(K + δ) − J(K*) over 100 perturbations = {worst_gap:.3e}, {elapsed:.1?}"),
    )
}

/// The small-noise regret setup; `overrides` replaces or adds fields.
fn regret_config(overrides: &str) -> ExperimentConfig {
    let mut cfg: serde_json::Map<String, serde_json::Value> = serde_json::from_str(
        r#"{"n": 10, "p": 5, "s": 5, "sigma_w": 0.001, "T0": 2000, "gamma": 2, "num_epochs": 5,
            "replications": 10, "base_seed": 2024, "shared_model": true}"#,
    )
    .unwrap();
    let extra: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&format!("{{{overrides}}}")).unwrap();
    cfg.extend(extra);
    let text = serde_json::to_string(&cfg).unwrap();
    ExperimentConfig::from_json(&text).unwrap()
}

/// Runs grouped by seed, epochs in order.
fn runs(rows: &[RegretRow]) -> Vec<Vec<&RegretRow>> {
    let mut out: Vec<Vec<&RegretRow>> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(run) if run[0].seed == r.seed => run.push(r),
            _ => out.push(vec![r]),
        }
    }
    out
}

fn final_regrets(rows: &[RegretRow]) -> Vec<f64> {
    runs(rows).iter().map(|r| r.last().unwrap().regret).collect()
}

fn regret_sublinearity() -> Outcome {
    let start = Instant::now();
    let base = run_regret_sweep(&regret_config("")).unwrap().remove(0);
    let per_run = runs(&base);
    let excess = |epoch: usize| {
        median(
            &per_run
                .iter()
                .map(|run| {
                    let prev = if epoch == 0 { (0, 0.0) } else { (run[epoch - 1].t, run[epoch - 1].regret) };
                    (run[epoch].regret - prev.1) / (run[epoch].t - prev.0) as f64
                })
                .collect::<Vec<_>>(),
        )
    };
    let (e0, e4) = (excess(0), excess(4));
    let slope = median(
        &per_run
            .iter()
            .filter_map(|run| log_log_slope(&run.iter().map(|r| (r.t as f64, r.regret)).collect::<Vec<_>>()))
            .collect::<Vec<_>>(),
    );
    let sigma = run_regret_sweep(&regret_config(r#""sigma_w": [0.001, 0.01]"#)).unwrap();
    let by_sigma: Vec<f64> = sigma.iter().map(|c| median(&final_regrets(c))).collect();
    let by_modes: Vec<f64> = [4, 10]
        .iter()
        .map(|s| {
            let cfg = regret_config(&format!(r#""sigma_w": 0.01, "s": {s}"#));
            median(&final_regrets(&run_regret_sweep(&cfg).unwrap()[0]))
        })
        .collect();
    let elapsed = start.elapsed();
    let a = e0 > 0.0 && e0 >= 2.0 * e4;
    let b = slope > 0.0 && slope < 0.9;
    let c = by_sigma[0] <= by_sigma[1] && by_modes[0] <= by_modes[1];
    outcome(
        a && b && c && elapsed < Duration::from_secs(1200),
        format!(
            "(a) excess {e0:.3e} -> {e4:.3e} [{}]; (b) slope {slope:.3} [{}]; (c) regret by sigma_w {by_sigma:.4?}, by s {by_modes:.4?} [{}]; {elapsed:.1?}",
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" },
            if c { "ok" } else { "fail" },
        ),
    )
}

fn known_b_improvement() -> Outcome {
    let start = Instant::now();
    let unknown = run_regret_sweep(&regret_config("")).unwrap().remove(0);
    let known = run_regret_sweep(&regret_config(r#""known_b": true"#)).unwrap().remove(0);
    let (ru, rk) = (runs(&unknown), runs(&known));
    let param = |r: &RegretRow| r.err_a.unwrap_or(f64::INFINITY).max(r.err_b.unwrap_or(f64::INFINITY));
    let wins = ru
        .iter()
        .zip(&rk)
        .filter(|(u, k)| {
            assert_eq!(u[0].seed, k[0].seed);
            param(k.last().unwrap()) <= param(u.last().unwrap())
        })
        .count();
    let a_only = ru
        .iter()
        .zip(&rk)
        .filter(|(u, k)| k.last().unwrap().err_a <= u.last().unwrap().err_a)
        .count();
    let (mu, mk) = (median(&final_regrets(&unknown)), median(&final_regrets(&known)));
    let elapsed = start.elapsed();
    outcome(
        wins >= 7 && mk <= mu && elapsed < Duration::from_secs(900),
        format!(
            "known B identifies better in {wins}/10 seeds ({a_only}/10 on A alone); median final regret {mk:.4} vs {mu:.4}; {elapsed:.1?}"
        ),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    };
    let sysid = write(
        "sysid.json",
        r#"{"n": 3, "p": 2, "s": 2, "sigma_w": [0.01, 0.1], "T": [500, 2000], "replications": 3}"#,
    );
    let regret = write(
        "regret.json",
        r#"{"n": 3, "p": 2, "s": 2, "sigma_w": 0.01, "T0": 200, "num_epochs": 3, "replications": 3}"#,
    );
    let single = write(
        "single.json",
        r#"{"n": 2, "p": 1, "s": 2, "sigma_w": 0.05, "T0": 200, "num_epochs": 2}"#,
    );
    let exe = env!("CARGO_BIN_EXE_mjs-bench");
    let run = |cmd: &str, cfg: &std::path::Path, jobs: &str| {
        let out = Command::new(exe)
            .args([cmd, "--config", cfg.to_str().unwrap(), "--seed", "99", "--jobs", jobs])
            .env_remove("MJS_BENCH_JOBS")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let mut same = true;
    for (cmd, cfg) in [("sysid-sweep", &sysid), ("regret-sweep", &regret), ("single", &single)] {
        let first = run(cmd, cfg, "1");
        same &= !first.is_empty() && first == run(cmd, cfg, "1") && first == run(cmd, cfg, "4");
    }
    outcome(same, "sysid-sweep, regret-sweep and single byte-identical across reruns and thread counts")
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 mean-square stability certification", mss_certification),
        ("2 second-moment recursion vs Monte Carlo", covariance_oracle),
        ("3 scalar ground truth", scalar_truths),
        ("4 noiseless exact identification", noiseless_identification),
        ("5 identification rate trend", identification_trend),
        ("6 optimality spot-check", optimality_spot_check),
        ("7 adaptive regret sublinearity", regret_sublinearity),
        ("8 known-B improvement", known_b_improvement),
        ("9 CLI determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!("[{}] {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
