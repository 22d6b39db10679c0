use std::fs;
use std::path::Path;

use shadagrad::harness::{
    compare, load_records, read_rows, run_experiment, verify, write_rows, ExperimentConfig, CSV_HEADER,
};
use shadagrad::optimizers::{weighted_metric, EpochRow};
use shadagrad::Error;

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).unwrap()
}

fn small(optimizers: &str, epochs: usize, seeds: &str) -> ExperimentConfig {
    config(&format!(
        r#"{{"problem": {{"name": "quartic_sigmoid", "n": 8, "d": 3, "seed": 1}}, "m": 4,
            "optimizers": {optimizers}, "epochs": {epochs}, "seeds": {seeds}}}"#
    ))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn single_cell_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(r#"[{"method": "sgd", "sampling": "shuffled", "etas": [0.1]}]"#, 1, "[0]");
    let out = run_experiment(&cfg, Some(dir.path()), None).unwrap();
    assert_eq!(out.index.cells.len(), 1);
    let csv = fs::read_to_string(dir.path().join(&out.index.cells[0].csv)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], CSV_HEADER.join(","));
}

#[test]
fn cell_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(
        r#"[{"method": "sgd", "sampling": "uniform"}, {"method": "shadagrad", "sampling": "shuffled"}]"#,
        2,
        "[0, 1]",
    );
    let out = run_experiment(&cfg, Some(dir.path()), Some(2)).unwrap();
    assert_eq!(out.index.cells.len(), 12);
    assert_eq!(load_records(dir.path()).unwrap().len(), 12);
    let names: Vec<&str> = out.index.cells.iter().map(|c| c.name.as_str()).collect();
    assert!(names.contains(&"shadagrad_s_gamma3_eta0.01_seed1"), "{names:?}");
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small(
        r#"[{"method": "shadagrad"}, {"method": "adagrad_f", "sampling": "uniform"}]"#,
        6,
        "[3, 4]",
    );
    run_experiment(&cfg, Some(a.path()), Some(4)).unwrap();
    run_experiment(&cfg, Some(b.path()), Some(1)).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), (2 + 1) * 3 * 2 * 2 + 1);
    assert_eq!(fa, fb);
}

#[test]
fn csv_round_trip_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(r#"[{"method": "shadagrad", "sampling": "shuffled", "etas": [0.5]}]"#, 20, "[0]");
    let out = run_experiment(&cfg, Some(dir.path()), None).unwrap();
    let rows = read_rows(&dir.path().join(&out.index.cells[0].csv)).unwrap();
    assert_eq!(rows, out.records[0].rows);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.t, k + 1);
        let norms: Vec<f64> = rows[..=k].iter().map(|r| r.grad_norm).collect();
        assert!((weighted_metric(&norms) - r.weighted_metric).abs() <= 1e-12);
    }

    let odd = vec![EpochRow {
        t: 1,
        eta_t: 0.1,
        loss: 1.0 / 3.0,
        grad_norm: 5e-324,
        rgps_norm: 1e300,
        weighted_metric: 0.1 + 0.2,
        delta: 0.0,
        kappa: f64::INFINITY,
        gate_attempts: 3,
        grad_evals: u64::MAX,
    }];
    let path = dir.path().join("odd.csv");
    write_rows(&path, &odd).unwrap();
    assert_eq!(read_rows(&path).unwrap(), odd);
}

#[test]
fn compare_summaries() {
    let a = tempfile::tempdir().unwrap();
    let cfg = small(r#"[{"method": "sgd", "sampling": "shuffled", "etas": [0.5, 0.05]}]"#, 10, "[0, 1, 2]");
    run_experiment(&cfg, Some(a.path()), None).unwrap();
    let recs = load_records(a.path()).unwrap();

    let one = compare(&recs[..1], 1e-3).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.rows[0].final_weighted_metric, recs[0].rows.last().unwrap().weighted_metric);
    // never reached
    assert_eq!(compare(&recs[..1], 0.0).unwrap().rows[0].epochs_to_eps, 11);
    // reached immediately
    assert_eq!(compare(&recs[..1], 1e9).unwrap().rows[0].epochs_to_eps, 1);

    let twice = compare(&[recs[0].clone(), recs[0].clone()], 1e-3).unwrap();
    assert_eq!(twice.rows[0], twice.rows[1]);

    let all = compare(&recs, 1e-3).unwrap();
    assert_eq!(all.best.len(), 1);
    assert_eq!(all.best[0].seeds, 3);
    assert!([0.5, 0.05].contains(&all.best[0].eta));
    let table = all.table();
    assert!(table.lines().count() >= 7);
    let path = a.path().join("summary.csv");
    all.write_csv(&path).unwrap();
    assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 7);

    let b = tempfile::tempdir().unwrap();
    let mut other = cfg.clone();
    other.problem.seed = 2;
    run_experiment(&other, Some(b.path()), None).unwrap();
    let mut mixed = recs.clone();
    mixed.extend(load_records(b.path()).unwrap());
    assert!(matches!(compare(&mixed, 1e-3), Err(Error::Incompatible(_))));
    assert!(compare(&[], 1e-3).is_err());
}

#[test]
fn verify_compliant_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 8}, "m": 4,
            "optimizers": [{"method": "shadagrad", "sampling": "shuffled", "etas": ["theory"], "gamma": "m"}],
            "epochs": 30, "seeds": [0], "diagnostics": true, "gate_trials": 200}"#,
    );
    let bundle = verify(&cfg, Some(dir.path()), None).unwrap();
    assert_eq!(bundle.violations(), 0, "{bundle:?}");
    let applicable = bundle.cells[0].checks.iter().filter(|c| !c.not_applicable).count();
    assert_eq!(applicable, 5);
    assert!(bundle.gate_probability.is_some());
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn verify_flags_rank_deficiency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 8, "distinct": 1}, "m": 4,
            "optimizers": [{"method": "shadagrad", "sampling": "shuffled", "etas": [0.1], "gamma": "m"}],
            "epochs": 5, "seeds": [0], "gate": {"enabled": false}, "constants": {"c_sigma": 0.0},
            "diagnostics": true}"#,
    );
    let bundle = verify(&cfg, Some(dir.path()), None).unwrap();
    let cn = bundle.cells[0].checks.iter().find(|c| c.check == "condition_number").unwrap();
    assert!(cn.violations > 0);
    assert!(bundle.violations() > 0);
}

#[test]
fn verify_without_diagnostics_is_empty() {
    let cfg = small(r#"[{"method": "sgd"}]"#, 2, "[0]");
    let bundle = verify(&cfg, None, None).unwrap();
    assert!(bundle.cells.is_empty());
    assert_eq!(bundle.violations(), 0);
}

#[test]
fn exhausted_gate_is_recorded_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"{"problem": {"name": "quartic_sigmoid", "n": 8, "d": 3}, "m": 4,
            "optimizers": [{"method": "shadagrad", "sampling": "shuffled", "etas": [0.1]}],
            "epochs": 5, "seeds": [0], "gate": {"c_sigma": 100.0, "max_attempts": 3}}"#,
    );
    let out = run_experiment(&cfg, Some(dir.path()), None).unwrap();
    assert_eq!(out.incomplete(), 1);
    let m = &out.records[0].manifest;
    assert!(m.failure.as_deref().unwrap().contains("gate"));
    assert!(out.records[0].rows.is_empty());
    assert!(!out.index.cells[0].complete);
    assert_eq!(read_rows(&dir.path().join(&out.index.cells[0].csv)).unwrap(), vec![]);
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert!(matches!(ExperimentConfig::from_path(&missing), Err(Error::Config { .. })));
    let path = dir.path().join("cfg.json");
    fs::write(&path, ExperimentConfig::preset().to_json()).unwrap();
    assert_eq!(ExperimentConfig::from_path(&path).unwrap(), ExperimentConfig::preset());
}
