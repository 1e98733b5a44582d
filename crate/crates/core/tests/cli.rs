use std::fs;
use std::process::Command;

use dglmc::cli::{cmd_bounds, cmd_compare, cmd_generate, cmd_run};
use dglmc::io::{read_chain, ExperimentConfig, SamplerKind, Table};

fn small_toy() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.n = 600;
    cfg.cluster.workers = 3;
    cfg.run.iters = 4000;
    cfg.run.burn_in = 400;
    cfg
}

fn report_value(dir: &std::path::Path, key: &str) -> String {
    let t = Table::read(&dir.join("report.csv")).unwrap();
    t.rows.iter().find(|r| r[0] == key).unwrap_or_else(|| panic!("missing {key}"))[1].clone()
}

#[test]
fn generate_splits_the_reference_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    cmd_generate(&cfg, dir.path()).unwrap();
    for i in 0..10 {
        let text = fs::read_to_string(dir.path().join(format!("shard_{i}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 2001, "shard {i}: header plus 2000 rows");
    }
}

#[test]
fn generate_one_row_per_shard_and_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = ExperimentConfig::default();
    cfg.model.n = 4;
    cfg.cluster.workers = 4;
    cmd_generate(&cfg, a.path()).unwrap();
    cmd_generate(&cfg, b.path()).unwrap();
    for i in 0..4 {
        let name = format!("shard_{i}.csv");
        let x = fs::read(a.path().join(&name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(&name)).unwrap());
        assert_eq!(String::from_utf8(x).unwrap().lines().count(), 2);
    }
}

#[test]
fn run_with_one_kept_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_toy();
    cfg.run.iters = 2;
    cfg.run.burn_in = 1;
    cmd_run(&cfg, dir.path(), false).unwrap();
    let text = fs::read_to_string(dir.path().join("theta_chain.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iter,theta_1,theta_2");
    assert_eq!(text.lines().count(), 2);
    assert!(dir.path().join("wall.txt").exists());
}

#[test]
fn rerun_gives_identical_chain() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_toy();
    cmd_run(&cfg, a.path(), false).unwrap();
    cmd_run(&cfg, b.path(), false).unwrap();
    assert_eq!(
        fs::read(a.path().join("theta_chain.csv")).unwrap(),
        fs::read(b.path().join("theta_chain.csv")).unwrap()
    );
}

#[test]
fn report_mean_is_close_to_the_exact_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.run.iters = 30_000;
    cfg.run.burn_in = 3_000;
    cmd_run(&cfg, dir.path(), false).unwrap();
    assert_eq!(report_value(dir.path(), "validated"), "true");
    for k in 1..=2 {
        let m: f64 = report_value(dir.path(), &format!("mean_{k}")).parse().unwrap();
        let se: f64 = report_value(dir.path(), &format!("se_{k}")).parse().unwrap();
        let ex: f64 = report_value(dir.path(), &format!("exact_mean_{k}")).parse().unwrap();
        assert!((m - ex).abs() <= 4.0 * se, "coordinate {k}: {m} vs {ex} (se {se})");
    }
    let chain = read_chain(&dir.path().join("theta_chain.csv")).unwrap();
    assert_eq!(chain.0.nrows(), 27_000);
}

#[test]
fn unvalidated_hyperparameters_need_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_toy();
    cfg.sampler.rho = Some(0.01);
    cfg.sampler.gamma = Some(1.0);
    assert!(cmd_run(&cfg, dir.path(), false).is_err());
}

#[test]
fn bounds_table_has_the_unit_budget_at_infinite_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.bounds.dims = vec![8, 16];
    cfg.bounds.eps = vec![f64::INFINITY, 0.1];
    let t = cmd_bounds(&cfg, dir.path()).unwrap();
    assert_eq!(t.rows.len(), 4);
    let eps = t.column("eps").unwrap();
    let n = t.column("n_eps").unwrap();
    for r in 0..4 {
        if eps[r] == "inf" {
            assert_eq!(n[r], "1");
        }
    }
    // doubling d at fixed ε roughly quadruples the budget
    let n8: f64 = n[1].parse().unwrap();
    let n16: f64 = n[3].parse().unwrap();
    assert!((3.0..6.0).contains(&(n16 / n8)));
    let written = Table::read(&dir.path().join("bounds.csv")).unwrap();
    assert_eq!(written.rows, t.rows);
}

#[test]
fn compare_with_one_sampler_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_toy();
    cfg.compare.samplers = vec![SamplerKind::Dglmc];
    cfg.compare.reference_iters = 4000;
    cfg.compare.reference_burn_in = 400;
    cfg.compare.pilot_iters = 1000;
    let rows = cmd_compare(&cfg, dir.path(), false).unwrap();
    assert_eq!(rows.len(), 1);
    let t = Table::read(&dir.path().join("compare.csv")).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.rows[0][0], "dglmc");
    assert!(dir.path().join("hpd_trace.csv").exists());
}

#[test]
fn binary_reports_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.kind = gaussian-toy\nsampler.bogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dglmc"))
        .args(["run", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn binary_writes_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.cfg");
    fs::write(&cfg, "bounds.dims = 4, 8\nbounds.eps = 0.2\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_dglmc"))
        .args(["bounds", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let t = Table::read(&dir.path().join("bounds.csv")).unwrap();
    assert_eq!(t.rows.len(), 2);
}
