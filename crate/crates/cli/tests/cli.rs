use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rigtune::bench::{bench_setup, SyntheticSpec};
use rigtune::io::{self, save_rig, write_corpus, CorpusPaths, ExpressionRecord};
use serde_json::{json, Value};

fn rigtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rigtune"))
        .args(args)
        .output()
        .expect("spawn rigtune")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, value: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn synthetic_finetune(mode: &str, stages: Option<Vec<&str>>) -> Value {
    json!({
        "format_version": 1,
        "finetune": {
            "source": { "kind": "synthetic", "spec": SyntheticSpec::desk(3) },
            "pipeline": {
                "mode": mode,
                "stages": stages,
                "gamma2": 0.0,
                "spurious_weight": 0.1,
                "filtered_derivative": "masked"
            },
            "optimizer": {
                "step_size": 0.5,
                "max_iters": 40,
                "line_search": { "kind": "halving", "max_halvings": 12 },
                "sample_every": 5
            }
        }
    })
}

#[test]
fn repro_table1_exits_zero_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t1");
    let o = rigtune(&["repro", "table1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("table1.csv")).unwrap();
    assert!(csv.starts_with(",L_D,"));
    assert!(csv.contains("\nDirect,") && csv.contains("gamma1 only"));
    let m = read_json(out.join("manifest.json"));
    assert_eq!(m["passed"], true);
    assert!(m["files"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f["path"] == "table1.csv"));
}

#[test]
fn repro_fig7_writes_landscape_grids() {
    let dir = tempfile::tempdir().unwrap();
    let o = rigtune(&["repro", "fig7", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["fig7_t1.csv", "fig7_t2.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn unknown_target_rejected() {
    let o = rigtune(&["repro", "table9"]);
    assert!(!o.status.success());
}

#[test]
fn finetune_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ft.json",
        &synthetic_finetune("open_source", None),
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = rigtune(&[
            "finetune",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--jobs",
            "2",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "theta_hat_T.json",
        "stages.csv",
        "stage_expressions.csv",
        "pipeline_report.json",
        "manifest.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(a.join("trajectory_s1_decimated.csv").exists());
    let rig = io::load_rig(&a.join("theta_hat_T.json")).unwrap();
    assert_eq!(rig.n_params(), 120);

    let stages = std::fs::read_to_string(a.join("stages.csv")).unwrap();
    let primary: Vec<(f64, f64)> = stages
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[3].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    assert_eq!(primary.len(), 4);
    for (before, after) in primary {
        assert!(after <= before, "{after} > {before}");
    }
}

#[test]
fn seed_flag_changes_synthetic_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ft.json",
        &synthetic_finetune("black_box", None),
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(
        rigtune(&["finetune", "--config", &cfg, "--out", a.to_str().unwrap()])
            .status
            .success()
    );
    assert!(rigtune(&[
        "finetune",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "4"
    ])
    .status
    .success());
    assert_ne!(
        std::fs::read(a.join("theta_hat_T.json")).unwrap(),
        std::fs::read(b.join("theta_hat_T.json")).unwrap()
    );
    assert!(!a.join("trajectory_s1_decimated.csv").exists());
}

#[test]
fn black_box_with_decimated_stage_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_finetune(
        "black_box",
        Some(vec!["s1_decimated", "s2_filtered_primary"]),
    );
    cfg["finetune"]["source"] = json!({
        "kind": "files",
        "rig": "missing_rig.json",
        "expressions": "missing.expressions.json",
        "geometry": "missing.geometry.json"
    });
    let cfg = write_config(dir.path(), "bb.json", &cfg);
    let out = dir.path().join("out");
    let o = rigtune(&["finetune", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("pipeline stages"), "{err}");
    assert!(!err.contains("missing_rig"), "{err}");
    assert!(!out.exists());
}

#[test]
fn config_schema_is_strict() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = synthetic_finetune("open_source", None);
    extra["finetune"]["optimiser"] = json!({});
    let p = write_config(dir.path(), "extra.json", &extra);
    let o = rigtune(&["finetune", "--config", &p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));

    let mut version = synthetic_finetune("open_source", None);
    version["format_version"] = json!(2);
    let p = write_config(dir.path(), "version.json", &version);
    let o = rigtune(&["finetune", "--config", &p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format_version"), "{}", stderr(&o));
}

#[test]
fn subprocess_failure_reports_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ft.json",
        &synthetic_finetune("black_box", None),
    );
    let out = dir.path().join("out");
    let o = rigtune(&[
        "finetune",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--tracker",
        "subprocess:while read l; do echo not-json; done",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("transcript") && err.contains("not-json"),
        "{err}"
    );
}

/// Rig at θ_M plus train and holdout corpora captured at θ_GT.
fn calibration_files(dir: &Path) -> (Vec<ExpressionRecord>, CorpusPaths, CorpusPaths) {
    let s = bench_setup(&SyntheticSpec::desk(5)).unwrap();
    save_rig(
        &dir.join("rig_m.json"),
        &s.rig.with_theta(s.theta_m.clone()).unwrap(),
    )
    .unwrap();
    let train = write_corpus(&dir.join("train"), &s.train, Some(&s.spec)).unwrap();
    let holdout = write_corpus(&dir.join("holdout"), &s.holdout, Some(&s.spec)).unwrap();
    let records = io::load_expressions(&train.expressions).unwrap();
    (records, train, holdout)
}

fn calibrate_config(train: &CorpusPaths, holdout: &CorpusPaths, augment: &[&str]) -> Value {
    json!({
        "format_version": 1,
        "calibrate": {
            "rig": "rig_m.json",
            "expressions": train.expressions.file_name().unwrap().to_str().unwrap(),
            "geometry": train.geometry.file_name().unwrap().to_str().unwrap(),
            "holdout_expressions": holdout.expressions.file_name().unwrap().to_str().unwrap(),
            "holdout_geometry": holdout.geometry.file_name().unwrap().to_str().unwrap(),
            "epsilon_reg": 1e-6,
            "augment": augment
        }
    })
}

#[test]
fn calibrate_honest_corpus_keeps_controls() {
    let dir = tempfile::tempdir().unwrap();
    let (records, train, holdout) = calibration_files(dir.path());
    let cfg = write_config(
        dir.path(),
        "cal.json",
        &calibrate_config(&train, &holdout, &[]),
    );
    let out = dir.path().join("out");
    let o = rigtune(&[
        "calibrate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let report = read_json(out.join("calibration_report.json"));
    assert_eq!(report["augmented"].as_array().unwrap().len(), 0);
    let names: Vec<String> =
        serde_json::from_value(json!(io::load_rig(&dir.path().join("rig_m.json"))
            .unwrap()
            .control_names()))
        .unwrap();
    for (pair, rec) in report["pairs"].as_array().unwrap().iter().zip(&records) {
        let c_plus: Vec<f64> = serde_json::from_value(pair["c_plus"].clone()).unwrap();
        for (i, name) in names.iter().enumerate() {
            assert_eq!(
                c_plus[i],
                rec.controls.get(name).copied().unwrap_or(0.0),
                "{}",
                rec.name
            );
        }
    }
    let h = &report["holdout"];
    assert!(h["error_fit"].as_f64().unwrap() < h["error_prior"].as_f64().unwrap());
    assert!(out.join("fitted_rig.json").exists() && out.join("calibration_residuals.csv").exists());
    assert!(
        read_json(out.join("manifest.json"))["files"]
            .as_array()
            .unwrap()
            .len()
            == 3
    );
}

#[test]
fn calibrate_reports_masked_and_augmented_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (mut records, train, holdout) = calibration_files(dir.path());
    records[1].geometry_mask = Some((0..30).collect());
    io::save_expressions(&train.expressions, &records).unwrap();
    let target = records[2].name.clone();
    let cfg = write_config(
        dir.path(),
        "cal.json",
        &calibrate_config(&train, &holdout, &[&target]),
    );
    let out = dir.path().join("out");
    let o = rigtune(&[
        "calibrate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let report = read_json(out.join("calibration_report.json"));
    let pairs = report["pairs"].as_array().unwrap();
    let masked: Vec<usize> = serde_json::from_value(pairs[1]["masked_rows"].clone()).unwrap();
    assert_eq!(masked, (30..60).collect::<Vec<_>>());
    assert!(pairs[0]["masked_rows"].as_array().unwrap().is_empty());
    assert_eq!(report["augmented"], json!([target]));
    assert!(!pairs[2]["augmented_controls"]
        .as_array()
        .unwrap()
        .is_empty());
    let csv = std::fs::read_to_string(out.join("calibration_residuals.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().contains(",30;31;32;"));
}

#[test]
fn calibrate_missing_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cal.json",
        &json!({"format_version": 1, "calibrate": {"rig": "nope.json", "expressions": "e.json", "geometry": "g.json"}}),
    );
    let o = rigtune(&["calibrate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}
