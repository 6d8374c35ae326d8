use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

fn votereg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_votereg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&read(path)).unwrap()
}

/// Headerless CSV, response first, with `y = 3 x1 + 1.5 x2 + 2 x5` exactly.
fn noiseless_file(dir: &Path) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut text = String::new();
    for _ in 0..80 {
        let x: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = 3.0 * x[0] + 1.5 * x[1] + 2.0 * x[4];
        let row: Vec<String> = std::iter::once(y).chain(x).map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let path = dir.join("noiseless.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn noiseless_signal_is_selected_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = noiseless_file(dir.path());
    let out = dir.path().join("out");
    let run = votereg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--response",
        "0",
        "--no-header",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.lines().any(|l| l == "selected: 1,2,5"), "{stdout}");
    assert_eq!(read(&out.join("report.txt")), stdout);
    let results = json(&out.join("results.json"));
    assert_eq!(results["selected"], serde_json::json!(["1", "2", "5"]));
    assert_eq!(results["selected_indices"], serde_json::json!([0, 1, 4]));
    let coef = &results["final_fit"]["coefficients"];
    for (j, want) in [(0, 3.0), (1, 1.5), (4, 2.0)] {
        assert!((coef[j].as_f64().unwrap() - want).abs() < 1e-6);
    }
    let csv = read(&out.join("report.csv"));
    assert!(csv.starts_with("predictor,votes,selected,coefficient\n"));
    assert_eq!(csv.lines().count(), 9);
    assert!(!csv.contains('\r'));
}

#[test]
fn single_squared_estimation_loss_has_unit_weight() {
    let dir = tempfile::tempdir().unwrap();
    let data = noiseless_file(dir.path());
    let out = dir.path().join("out");
    let run = votereg(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--response",
        "0",
        "--no-header",
        "--estimate",
        "squared",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let results = json(&out.join("results.json"));
    assert_eq!(results["weights"], serde_json::json!([1.0]));
    assert_eq!(results["estimation_losses"], serde_json::json!(["squared"]));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = noiseless_file(dir.path());
    let d = data.to_str().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    for args in [
        vec!["fit", "--data", d, "--out", o],
        vec!["fit", "--response", "0", "--out", o],
        vec!["fit", "--data", d, "--response", "0", "--no-header", "--losses", "nonsense", "--out", o],
        vec!["fit", "--bogus-flag"],
        vec!["simulate", "--workers", "0"],
        vec!["simulate", "--dists", "cauchy", "--out", o],
        vec!["diagnose", "--density", "cauchy", "--out", o],
    ] {
        let run = votereg(&args);
        assert_eq!(run.status.code(), Some(2), "{args:?}");
        assert!(run.stdout.is_empty(), "{args:?} wrote to stdout");
        assert!(!run.stderr.is_empty());
    }
    let bad_config = dir.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"lossez": "lad"}"#).unwrap();
    let run = votereg(&["fit", "--config", bad_config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let garbled = dir.path().join("garbled.csv");
    std::fs::write(&garbled, "y,x\n1,2\n3,oops\n").unwrap();
    let o = dir.path().join("o");
    for path in [&missing, &garbled] {
        let run = votereg(&["fit", "--data", path.to_str().unwrap(), "--response", "y", "--out", o.to_str().unwrap()]);
        assert_eq!(run.status.code(), Some(1));
        assert!(run.stdout.is_empty());
    }
    let run = votereg(&["fit", "--data", garbled.to_str().unwrap(), "--response", "y", "--out", o.to_str().unwrap()]);
    let err = String::from_utf8(run.stderr).unwrap();
    assert!(err.contains("row 3, column 2"), "{err}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let out_file = dir.path().join("from-file");
    let out_flag = dir.path().join("from-flag");
    std::fs::write(
        &config,
        serde_json::json!({"out": out_file, "diagnose": {"density": "normal:3", "ks": [9]}}).to_string(),
    )
    .unwrap();
    let run = votereg(&["diagnose", "--config", config.to_str().unwrap()]);
    assert!(run.status.success());
    assert_eq!(json(&out_file.join("results.json"))["rows"].as_array().unwrap().len(), 1);
    let run = votereg(&[
        "diagnose",
        "--config",
        config.to_str().unwrap(),
        "--ks",
        "9,99",
        "--out",
        out_flag.to_str().unwrap(),
    ]);
    assert!(run.status.success());
    let results = json(&out_flag.join("results.json"));
    assert_eq!(results["rows"].as_array().unwrap().len(), 2);
    assert!((results["fisher_information"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn diagnose_reaches_the_fisher_information() {
    let dir = tempfile::tempdir().unwrap();
    for (density, target) in [("normal(1)", 1.0), ("normal:3", 1.0 / 3.0)] {
        let out = dir.path().join(density.replace([':', '(', ')'], "_"));
        let run = votereg(&["diagnose", "--density", density, "--ks", "9,29,99", "--out", out.to_str().unwrap()]);
        assert!(run.status.success());
        let rows = json(&out.join("results.json"))["rows"].as_array().unwrap().clone();
        let last = rows.last().unwrap();
        assert_eq!(last["k"], 99);
        assert!((last["value"].as_f64().unwrap() - target).abs() / target < 0.02);
        for r in &rows {
            assert!(r["inverse_residual"].as_f64().unwrap() < 1e-8);
        }
        let text = String::from_utf8(run.stdout).unwrap();
        assert!(text.contains("max |H H^-1 - I|"));
    }
}

#[test]
fn simulate_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let run = votereg(&[
            "simulate",
            "--replicates",
            "2",
            "--seed",
            "7",
            "--dists",
            "T2,LMN",
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        let files: Vec<Vec<u8>> =
            ["results.json", "report.csv", "report.txt"].iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
        (run.stdout, files)
    };
    let first = go("a", "1");
    let again = go("b", "1");
    let wide = go("c", "8");
    assert_eq!(first, again);
    assert_eq!(first, wide);
    let csv = String::from_utf8(first.1[1].clone()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,dist,mnc,mni,re,time_ms,replicates");
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn screen_then_fit_on_the_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let screened = dir.path().join("screen");
    let run = votereg(&["screen", "--synthetic", "--out", screened.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary = json(&screened.join("results.json"));
    assert_eq!(summary["kept"], 300);
    let csv = read(&screened.join("report.csv"));
    assert!(csv.starts_with("rank,probe,corr\n"));
    assert_eq!(csv.lines().count(), 301);

    let fitted = dir.path().join("fit");
    let run = votereg(&[
        "fit",
        "--data",
        screened.join("screened.csv").to_str().unwrap(),
        "--response",
        "target_at",
        "--folds",
        "5",
        "--baselines",
        "lad,ls,cqr",
        "--out",
        fitted.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let results = json(&fitted.join("results.json"));
    let vote_size = results["selected"].as_array().unwrap().len();
    let sizes: Vec<usize> =
        results["baselines"].as_array().unwrap().iter().map(|b| b["support"].as_array().unwrap().len()).collect();
    eprintln!("vote keeps {vote_size}; absolute, squared, composite keep {sizes:?}");
    assert_eq!(sizes.len(), 3);
    assert!(vote_size > 0);
    for s in sizes {
        assert!(vote_size < s, "vote {vote_size} vs baseline {s}");
    }
    // regression snapshot of the bundled corpus
    assert_eq!(vote_size, 10);
    let selected: Vec<&str> = results["selected"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(selected.contains(&"driver_00_at") && selected.contains(&"driver_01_at"));
}
