use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mjs_bench::{
    run_regret_sweep, run_sysid_sweep, write_regret_csv, write_sysid_csv, ExperimentConfig, REGRET_HEADER,
    SYSID_HEADER,
};

fn exe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mjs-bench"));
    c.env_remove("MJS_BENCH_JOBS");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_sysid() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{"n": 2, "p": 1, "s": 2, "sigma_w": [0.01, 0.05], "sigma_z": 0.02, "T": [300, 900], "replications": 4, "base_seed": 5}"#,
    )
    .unwrap()
}

/// Median and IQR with the textbook definition (linear interpolation
/// between order statistics at positions q·(k−1)), written independently
/// of the library.
fn reference_quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let (lo, frac) = (h as usize, h.fract());
    if lo + 1 < v.len() {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    } else {
        v[lo]
    }
}

#[test]
fn sysid_csv_schema_and_round_trip() {
    let cells = run_sysid_sweep(&small_sysid()).unwrap();
    let mut buf = Vec::new();
    write_sysid_csv(&mut buf, &cells).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "kind,n,p,s,sigma_w,sigma_z,T,seed,err_A,err_B,err_T,rel_Psi,samples_min"
    );
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), SYSID_HEADER.to_vec());
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let raw: Vec<&csv::StringRecord> = records.iter().filter(|r| &r[0] == "raw").collect();
    let flat: Vec<_> = cells.iter().flatten().collect();
    assert_eq!(raw.len(), flat.len());
    assert_eq!(raw.len(), 2 * 2 * 4);
    for (r, row) in raw.iter().zip(&flat) {
        assert_eq!(r[1].parse::<usize>().unwrap(), row.n);
        assert_eq!(r[4].parse::<f64>().unwrap(), row.sigma_w);
        assert_eq!(r[6].parse::<usize>().unwrap(), row.horizon);
        assert_eq!(r[7].parse::<u64>().unwrap(), row.seed);
        assert_eq!(r[8].parse::<f64>().unwrap(), row.err_a);
        assert_eq!(r[9].parse::<f64>().unwrap(), row.err_b);
        assert_eq!(r[10].parse::<f64>().unwrap(), row.err_t);
        assert_eq!(r[11].parse::<f64>().unwrap(), row.rel_psi);
        assert_eq!(r[12].parse::<usize>().unwrap(), row.samples_min);
    }

    // aggregate rows against a recomputation from the parsed raw rows
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &raw {
        groups.entry((r[4].to_string(), r[6].to_string())).or_default().push(r[11].parse().unwrap());
    }
    for kind in ["median", "iqr"] {
        let agg: Vec<_> = records.iter().filter(|r| &r[0] == kind).collect();
        assert_eq!(agg.len(), groups.len());
        for r in agg {
            let v = groups[&(r[4].to_string(), r[6].to_string())].clone();
            let expected = if kind == "median" {
                reference_quantile(v, 0.5)
            } else {
                reference_quantile(v.clone(), 0.75) - reference_quantile(v, 0.25)
            };
            let got: f64 = r[11].parse().unwrap();
            assert!((got - expected).abs() <= 1e-15 * expected.abs().max(1.0));
            assert_eq!(&r[7], "");
        }
    }
}

#[test]
fn regret_csv_schema() {
    let cfg = ExperimentConfig::from_json(
        r#"{"n": 2, "p": 1, "s": 2, "sigma_w": 0.01, "T0": 100, "num_epochs": 3, "replications": 3}"#,
    )
    .unwrap();
    let cells = run_regret_sweep(&cfg).unwrap();
    let mut buf = Vec::new();
    write_regret_csv(&mut buf, &cells).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "kind,n,p,s,sigma_w,T0,gamma,epoch,t,seed,regret,err_A,err_B,err_T,failed_cdare"
    );
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), REGRET_HEADER.to_vec());
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let raw: Vec<_> = records.iter().filter(|r| &r[0] == "raw").collect();
    assert_eq!(raw.len(), 9);
    let boundaries: Vec<usize> = raw[..3].iter().map(|r| r[8].parse().unwrap()).collect();
    assert_eq!(boundaries, vec![100, 300, 700]);
    for (r, row) in raw.iter().zip(cells.iter().flatten()) {
        assert_eq!(r[10].parse::<f64>().unwrap(), row.regret);
        assert_eq!(&r[14], if row.failed_cdare { "1" } else { "0" });
    }
    assert_eq!(records.iter().filter(|r| &r[0] == "median").count(), 3);
}

#[test]
fn larger_noise_hurts_and_larger_exploration_helps() {
    let cfg = ExperimentConfig::from_json(
        r#"{"n": 3, "p": 2, "s": 2, "sigma_w": [0.01, 0.1], "sigma_z": 0.01, "T": 4000,
            "replications": 6, "shared_model": true}"#,
    )
    .unwrap();
    let med = |c: &Vec<mjs_bench::SysidRow>| mjs_bench::stats::median(&c.iter().map(|r| r.rel_psi).collect::<Vec<_>>());
    let cells = run_sysid_sweep(&cfg).unwrap();
    assert!(med(&cells[0]) <= med(&cells[1]));
    let cfg = ExperimentConfig::from_json(
        r#"{"n": 3, "p": 2, "s": 2, "sigma_w": 0.01, "sigma_z": [0.01, 0.1], "T": 4000,
            "replications": 6, "shared_model": true}"#,
    )
    .unwrap();
    let cells = run_sysid_sweep(&cfg).unwrap();
    assert!(med(&cells[0]) >= med(&cells[1]));
}

#[test]
fn stdout_is_the_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"n": 2, "p": 1, "s": 2, "T": 200, "replications": 2}"#);
    let out = run(exe().args(["sysid-sweep", "--config", cfg.to_str().unwrap()]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("kind,n,p,s,"));

    let file = dir.path().join("out.csv");
    run(exe().args(["sysid-sweep", "--config", cfg.to_str().unwrap(), "--out", file.to_str().unwrap()]));
    assert_eq!(std::fs::read_to_string(file).unwrap(), text);
}

#[test]
fn invalid_json_names_the_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"n\": 2,\n \"p\": }");
    let out = exe().args(["sysid-sweep", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("byte offset 15"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn field_errors_and_kind_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "zero.json", r#"{"replications": 0}"#);
    let out = exe().args(["sysid-sweep", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().contains("`replications`"));
    let cfg = write(dir.path(), "kind.json", r#"{"kind": "regret-sweep"}"#);
    let out = exe().args(["sysid-sweep", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("regret-sweep"));
    let cfg = write(dir.path(), "ok.json", r#"{"n": 2, "p": 1, "s": 2, "T": 200, "replications": 1}"#);
    let out = exe()
        .args(["sysid-sweep", "--config", cfg.to_str().unwrap()])
        .env("MJS_BENCH_JOBS", "many")
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().contains("MJS_BENCH_JOBS"));
}

#[test]
fn seed_and_reps_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"n": 2, "p": 1, "s": 2, "T": 200, "replications": 5, "base_seed": 1}"#);
    let path = cfg.to_str().unwrap();
    let a = run(exe().args(["sysid-sweep", "--config", path, "--reps", "2"])).stdout;
    assert_eq!(String::from_utf8_lossy(&a).lines().filter(|l| l.starts_with("raw")).count(), 2);
    let b = run(exe().args(["sysid-sweep", "--config", path, "--reps", "2", "--seed", "2"])).stdout;
    assert_ne!(a, b);
    let c = run(exe().args(["sysid-sweep", "--config", path, "--reps", "2", "--seed", "1"]).env("MJS_BENCH_JOBS", "3"))
        .stdout;
    assert_eq!(a, c);
}

#[test]
fn single_report_for_the_two_mode_scalar_file() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/single.json");
    let out = run(exe().args(["single", "--config", root.to_str().unwrap()]));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["open_loop_rho"].as_f64().unwrap() - 0.9941).abs() < 1e-3);
    assert_eq!(v["mss"], serde_json::Value::Bool(true));
    assert_eq!(v["run"]["epochs"].as_array().unwrap().len(), 3);
}
