use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppl-stab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&["gen-data", "--n", "60", "--dim", "3", "--seed", "4", "--out", p(&data)]);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 61);
    // Same seed, same bytes.
    let again = dir.path().join("again.csv");
    ok(&["gen-data", "--n", "60", "--dim", "3", "--seed", "4", "--out", p(&again)]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());

    let rrm = dir.path().join("rrm.json");
    ok(&["train-rrm", "--data", p(&data), "--tau", "0.5", "--sigma", "0.5", "--out", p(&rrm)]);
    let w: Vec<f64> = serde_json::from_str(&fs::read_to_string(&rrm).unwrap()).unwrap();
    assert_eq!(w.len(), 3);

    let sgd = dir.path().join("sgd.json");
    ok(&["train-sgd", "--data", p(&data), "--tau", "0.5", "--eta", "0.05", "--T", "200", "--out", p(&sgd)]);
    let ws: Vec<f64> = serde_json::from_str(&fs::read_to_string(&sgd).unwrap()).unwrap();
    assert_eq!(ws.len(), 3);

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["risk", "--data", p(&data), "--model", p(&rrm), "--tau", "0.5"])).unwrap();
    let (a, b, m) = (
        report["r_point_emp"].as_f64().unwrap(),
        report["r_pair_emp"].as_f64().unwrap(),
        report["r_mixed_emp"].as_f64().unwrap(),
    );
    assert!((m - 0.5 * (a + b)).abs() < 1e-12);
}

#[test]
fn config_file_supplies_training_settings() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&["gen-data", "--n", "40", "--dim", "5", "--out", p(&data)]);
    let cfg = dir.path().join("train.toml");
    fs::write(
        &cfg,
        "[loss]\npointwise = \"logistic\"\npairwise = \"squared-ranking\"\ntau = 1.0\nball_radius = 2.0\n\n[sgd]\neta = 0.1\nT = 50\nseed = 3\n",
    )
    .unwrap();
    let a = ok(&["train-sgd", "--data", p(&data), "--config", p(&cfg)]);
    let b = ok(&["train-sgd", "--data", p(&data), "--config", p(&cfg)]);
    assert_eq!(a, b);
    let w: Vec<f64> = serde_json::from_str(&a).unwrap();
    assert!(w.iter().map(|v| v * v).sum::<f64>().sqrt() <= 2.0);

    fs::write(&cfg, "[loss]\npointwise = \"squared\"\npairwise = \"squared-ranking\"\nbogus = 1\n").unwrap();
    assert_eq!(run(&["train-sgd", "--data", p(&data), "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn bounds_print_json() {
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "bounds", "--theorem", "lemma1", "--L", "2", "--sigma", "0.5", "--tau", "1", "--n", "100",
    ]))
    .unwrap();
    // 4 L^2 (2 - tau) / (n sigma)
    assert!((v["value"].as_f64().unwrap() - 0.32).abs() < 1e-12);
    assert_eq!(v["precondition_ok"], true);

    let c: serde_json::Value =
        serde_json::from_str(&ok(&["bounds", "--theorem", "chernoff", "--mu", "5", "--delta", "0.1"])).unwrap();
    let ld = 10f64.ln();
    assert!((c["value"].as_f64().unwrap() - (5.0 + ld + (10.0 * ld).sqrt())).abs() < 1e-12);

    assert_eq!(run(&["bounds", "--theorem", "lemma1", "--L", "2"]).status.code(), Some(2));
    assert_eq!(run(&["bounds", "--theorem", "nope"]).status.code(), Some(2));
    assert_eq!(
        run(&["bounds", "--theorem", "thm1", "--gamma", "0.1", "--M", "1", "--tau", "0.5", "--n", "100", "--delta", "0.5"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn stability_writes_estimates_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "[loss]\npointwise = \"squared\"\npairwise = \"squared-ranking\"\ntau = 0.5\n\n[rrm]\nsigma = 1.0\n\n[data]\ndim = 3\nnoise_std = 0.1\nseed = 1\n").unwrap();
    let out = dir.path().join("stab");
    ok(&[
        "stability", "--config", p(&cfg), "--n", "20", "--outer-resamples", "3", "--pair-cap", "4",
        "--probe-size", "10", "--n-replacements", "2", "--draws-per-index", "1", "--out", p(&out),
    ]);
    let est: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("stability.json")).unwrap()).unwrap();
    assert!(est.is_object());
    let cells = fs::read_to_string(out.join("cells.csv")).unwrap();
    assert!(cells.starts_with("def,kind,i,j,trial,value,seed"));
    // 2 x 2 uniform cells, 3 x (20 + 4) x 2 on-average cells.
    assert_eq!(cells.lines().count(), 1 + 4 + 3 * 24 * 2);
}

#[test]
fn sweep_and_report_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    fs::write(
        &cfg,
        r#"{"master_seed": 5, "blocks": [{"name": "b", "algorithm": "sgd", "pointwise": "squared",
            "pairwise": "squared-ranking", "n": [20], "tau": [0.5], "eta": [0.01], "T": [50],
            "dim": 2, "checks": ["eqstab"]}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["sweep", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(0));
    let rep = run(&["report", "--in", p(&out)]);
    assert_eq!(rep.status.code(), Some(0));
    assert!(out.join("report.txt").exists());
    assert_eq!(run(&["report", "--in", p(&dir.path().join("missing"))]).status.code(), Some(2));
}
