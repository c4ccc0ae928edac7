use std::fs;

use ppl_stability::harness::{read_rows_csv, report_dir, run_sweep, write_rows_csv, ExperimentConfig};

const CONFIG: &str = r#"{
    "master_seed": 99,
    "blocks": [
        {
            "name": "sgd",
            "algorithm": "sgd",
            "pointwise": "logistic",
            "pairwise": "squared-ranking",
            "n": [30],
            "tau": [0.0, 1.0],
            "eta": [0.05],
            "T": [100],
            "dim": 3,
            "trials": 2,
            "checks": ["eqstab", "thm5", "cor2"],
            "outer_resamples": 4,
            "pair_cap": 8,
            "index_cap": 5,
            "population_size": 200
        },
        {
            "name": "avg",
            "algorithm": "rrm",
            "pointwise": "squared",
            "pairwise": "squared-ranking",
            "n": [20, 40],
            "tau": [0.5],
            "sigma": [1.0],
            "dim": 2,
            "checks": ["thm5", "thm6", "thm7", "lemma4"],
            "outer_resamples": 4,
            "pair_cap": 8,
            "population_size": 200
        }
    ]
}"#;

#[test]
fn sweep_writes_consistent_rows_and_a_report() {
    let cfg = ExperimentConfig::from_json(CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = run_sweep(&cfg, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 2 * 2 + 2);
    for f in ["config.json", "sweep.csv", "timings.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let back = read_rows_csv(fs::File::open(dir.path().join("sweep.csv")).unwrap()).unwrap();
    assert_eq!(back, rows);
    for r in &rows {
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.holds_consistent());
    }
    let timings = fs::read_to_string(dir.path().join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), rows.len() + 1);
    assert!(!fs::read_to_string(dir.path().join("sweep.csv")).unwrap().contains("seconds"));

    let rep = report_dir(dir.path()).unwrap();
    assert!(dir.path().join("report.txt").exists());
    assert!(rep.text.contains("eqstab"));

    // A stored flag that contradicts the stored values is caught.
    let mut bad = rows.clone();
    let flip = bad.iter_mut().find(|r| r.holds_eqstab.is_some()).unwrap();
    flip.holds_eqstab = flip.holds_eqstab.map(|h| !h);
    assert!(!bad.iter().all(|r| r.holds_consistent()));
    let mut buf = Vec::new();
    write_rows_csv(&bad, &mut buf).unwrap();
    fs::write(dir.path().join("sweep.csv"), buf).unwrap();
    assert!(!report_dir(dir.path()).unwrap().all_pass);
}
