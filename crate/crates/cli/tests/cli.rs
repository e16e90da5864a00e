use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countgpfa")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn matrix(p: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

/// Small simulated dataset in `dir`.
fn small_sim(dir: &Path, model: &str, seed: &str) {
    ok(&["simulate", "--model", model, "--seed", seed, "--neurons", "6", "--bins", "40", "--trials", "5", "--out", s(dir)]);
}

#[test]
fn simulate_paper_preset_shapes() {
    let d = tempfile::tempdir().unwrap();
    ok(&["simulate", "--model", "poisson", "--preset", "paper", "--seed", "1", "--out", s(d.path())]);
    let counts = fs::read_to_string(d.path().join("counts.csv")).unwrap();
    let mut lines = counts.lines();
    assert_eq!(lines.next(), Some("trial,neuron,bin,count"));
    assert_eq!(lines.count(), 20 * 200 * 20);
    assert!(counts.ends_with("19,19,199,") || counts.contains("\n19,19,199,"));
    let truth = json(&d.path().join("truth.json"));
    assert_eq!(truth["x_true"]["rows"], 2);
    assert_eq!(truth["x_true"]["cols"], 200);
    assert_eq!(truth["w_true"]["rows"], 20);
    assert_eq!(truth["w_true"]["cols"], 2);
    assert_eq!(truth["length_scales"], serde_json::json!([15.0, 60.0]));
    let manifest = json(&d.path().join("manifest.json"));
    assert_eq!(manifest["n_trials"], 20);
    assert_eq!(manifest["model"], "poisson");
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["simulate", "--model", "negbinom", "--seed", "3", "--out", s(d.path())]);
    }
    assert_eq!(fs::read(a.path().join("counts.csv")).unwrap(), fs::read(b.path().join("counts.csv")).unwrap());
    let c = tempfile::tempdir().unwrap();
    ok(&["simulate", "--model", "negbinom", "--seed", "4", "--out", s(c.path())]);
    assert_ne!(fs::read(a.path().join("counts.csv")).unwrap(), fs::read(c.path().join("counts.csv")).unwrap());
}

#[test]
fn missing_output_dir_is_named() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope");
    let out = run(&["simulate", "--model", "poisson", "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["simulate", "--model", "gaussian", "--out", "."]).status.code(), Some(2));
    assert_eq!(run(&["fit"]).status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    small_sim(d.path(), "poisson", "1");
    let counts = d.path().join("counts.csv");
    let out = run(&["fit", "--counts", s(&counts), "--model", "poisson", "--latents", "6", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("P < N"));
    assert!(!d.path().join("fit.json").exists());
    let out = run(&["fit", "--counts", s(&counts), "--model", "poisson", "--alpha", "2", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_counts_report_row_and_column() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.csv");
    fs::write(&p, "trial,neuron,bin,count\n0,0,0,1\n0,0,1,two\n").unwrap();
    let out = run(&["fit", "--counts", s(&p), "--model", "poisson", "--latents", "1", "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("column 4"), "{err}");
}

#[test]
fn fit_converges_and_keeps_best_restart() {
    let d = tempfile::tempdir().unwrap();
    small_sim(d.path(), "poisson", "2");
    let counts = d.path().join("counts.csv");
    for seed in ["1", "2"] {
        ok(&["fit", "--counts", s(&counts), "--model", "poisson", "--restarts", "3", "--seed", seed, "--out", s(d.path())]);
        let fit = json(&d.path().join("fit.json"));
        assert_eq!(fit["converged"], true);
        assert!(fit["iterations"].as_u64().unwrap() <= 500);
        let best = fit["restart_evidences"]
            .as_array()
            .unwrap()
            .iter()
            .filter_map(Value::as_f64)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(fit["final_evidence"].as_f64().unwrap(), best);
        let h = json(&d.path().join("hyperparameters.json"));
        assert_eq!(h, fit["hyperparameters"]);
    }
}

#[test]
fn infer_with_zero_loadings() {
    let d = tempfile::tempdir().unwrap();
    small_sim(d.path(), "poisson", "3");
    let fit = d.path().join("zero.json");
    let w = serde_json::json!({"rows": 6, "cols": 2, "data": vec![0.0; 12]});
    fs::write(&fit, serde_json::json!({"model": "poisson", "W": w, "length_scales": [4.0, 9.0]}).to_string()).unwrap();
    ok(&["infer", "--counts", s(&d.path().join("counts.csv")), "--fit", s(&fit), "--out", s(d.path())]);
    let x = matrix(&d.path().join("x_map.csv"));
    assert_eq!((x.len(), x[0].len()), (2, 40));
    assert!(x.iter().flatten().all(|&v| v == 0.0));
    let r = matrix(&d.path().join("rates.csv"));
    assert_eq!((r.len(), r[0].len()), (6, 40));
    assert!(r.iter().flatten().all(|&v| v == 1.0));
}

#[test]
fn infer_shape_mismatch_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    small_sim(d.path(), "poisson", "3");
    let fit = d.path().join("h.json");
    let w = serde_json::json!({"rows": 5, "cols": 1, "data": vec![0.1; 5]});
    fs::write(&fit, serde_json::json!({"model": "poisson", "W": w, "length_scales": [4.0]}).to_string()).unwrap();
    let out = run(&["infer", "--counts", s(&d.path().join("counts.csv")), "--fit", s(&fit), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_truth_against_itself() {
    let d = tempfile::tempdir().unwrap();
    small_sim(d.path(), "binomial", "4");
    let truth = json(&d.path().join("truth.json"));
    let data: Vec<f64> = truth["x_true"]["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let x_csv: String = data.chunks(40).map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n").collect();
    fs::write(d.path().join("x.csv"), x_csv).unwrap();
    // true rates from W_true X_true through the binomial rate
    let w: Vec<f64> = truth["w_true"]["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mut rates = String::new();
    for i in 0..6 {
        let row: Vec<String> = (0..40)
            .map(|t| {
                let eta = w[2 * i] * data[t] + w[2 * i + 1] * data[40 + t];
                (10.0 / (1.0 + (-eta).exp())).to_string()
            })
            .collect();
        rates.push_str(&row.join(","));
        rates.push('\n');
    }
    fs::write(d.path().join("r.csv"), rates).unwrap();
    ok(&[
        "evaluate",
        "--truth",
        s(&d.path().join("truth.json")),
        "--inferred",
        s(&d.path().join("x.csv")),
        "--rates",
        s(&d.path().join("r.csv")),
        "--out",
        s(d.path()),
    ]);
    let metrics = fs::read_to_string(d.path().join("metrics.csv")).unwrap();
    let vals: Vec<f64> = metrics.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(vals[0] < 1e-20, "{metrics}");
    assert!(vals[1] < 1e-20, "{metrics}");
}

#[test]
fn evaluate_requires_truth() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("x.csv"), "1,2\n").unwrap();
    let out = run(&["evaluate", "--inferred", s(&d.path().join("x.csv")), "--out", s(d.path())]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ground truth"));
    let out = run(&["evaluate", "--truth", s(&d.path().join("missing.json")), "--inferred", s(&d.path().join("x.csv")), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ground truth"));
}

/// simulate -> fit -> infer -> evaluate (with a curve) -> export-hyper.
fn pipeline(model: &str, dir: &Path, preset_scale: bool) {
    let sd = s(dir);
    if preset_scale {
        ok(&["simulate", "--model", model, "--seed", "5", "--out", sd]);
    } else {
        small_sim(dir, model, "5");
    }
    let counts = dir.join("counts.csv");
    ok(&["fit", "--counts", s(&counts), "--model", model, "--restarts", "1", "--seed", "5", "--out", sd]);
    ok(&["infer", "--counts", s(&counts), "--fit", s(&dir.join("fit.json")), "--out", sd]);
    let (truth, x_map, rates) = (dir.join("truth.json"), dir.join("x_map.csv"), dir.join("rates.csv"));
    let mut eval = vec![
        "evaluate",
        "--truth",
        s(&truth),
        "--inferred",
        s(&x_map),
        "--rates",
        s(&rates),
        "--restarts",
        "1",
        "--out",
        sd,
    ];
    if !preset_scale {
        eval.extend(["--curve", "2,4,6"]);
    }
    ok(&eval);
    let hyper = dir.join("exported.json");
    ok(&["export-hyper", "--fit", s(&dir.join("fit.json")), "--out", s(&hyper)]);
    let h = json(&hyper);
    for key in ["model", "W", "length_scales"] {
        assert!(h.get(key).is_some());
    }
}

#[test]
fn pipeline_closes_for_all_models_at_preset_scale() {
    for model in ["binomial", "poisson", "negbinom"] {
        let d = tempfile::tempdir().unwrap();
        pipeline(model, d.path(), true);
        let r = matrix(&d.path().join("rates.csv"));
        assert_eq!((r.len(), r[0].len()), (20, 200));
        if model == "poisson" {
            assert!(r.iter().flatten().all(|&v| v > 0.0));
        }
        let metrics = fs::read_to_string(d.path().join("metrics.csv")).unwrap();
        let err: f64 = metrics.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!(err < 0.2, "{model}: {metrics}");
    }
}

#[test]
fn curve_and_reruns() {
    let d = tempfile::tempdir().unwrap();
    pipeline("poisson", d.path(), false);
    let curve = fs::read_to_string(d.path().join("curve.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().collect();
    assert_eq!(rows[0], "model,seed,N,error");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("poisson,5,2,"));
    let first: Vec<Vec<u8>> = ["x_map.csv", "rates.csv", "metrics.csv", "fit.json"].iter().map(|f| fs::read(d.path().join(f)).unwrap()).collect();
    let e = tempfile::tempdir().unwrap();
    pipeline("poisson", e.path(), false);
    for (k, f) in ["x_map.csv", "rates.csv", "metrics.csv", "fit.json"].iter().enumerate() {
        assert_eq!(first[k], fs::read(e.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn export_hyper_negbinom_has_alpha() {
    let d = tempfile::tempdir().unwrap();
    small_sim(d.path(), "negbinom", "6");
    ok(&["fit", "--counts", s(&d.path().join("counts.csv")), "--model", "negbinom", "--restarts", "1", "--out", s(d.path())]);
    let out = d.path().join("h.json");
    ok(&["export-hyper", "--fit", s(&d.path().join("fit.json")), "--out", s(&out)]);
    assert_eq!(json(&out)["alpha"], 1.0);
    let bad = run(&["export-hyper", "--fit", s(&d.path().join("fit.json")), "--out", s(&d.path().join("no/h.json"))]);
    assert_eq!(bad.status.code(), Some(3));
}
