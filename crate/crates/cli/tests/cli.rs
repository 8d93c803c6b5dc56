//! End-to-end checks of the command surface: every command is run against
//! real files through the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn drma() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drma"))
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn drma");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("small.csv");
    std::fs::write(
        &path,
        "study_id,cluster,dose,events,size\n\
         s1,a,0,12,120\n\
         s1,a,4,20,120\n\
         s1,a,8,25,120\n\
         s2,a,0,10,100\n\
         s2,a,5,18,100\n\
         s3,b,0,15,140\n\
         s3,b,3,20,140\n\
         s3,b,9,30,140\n",
    )
    .unwrap();
    path
}

#[test]
fn validate_reports_bundled_dataset() {
    let out = run_ok(
        drma()
            .arg("validate")
            .arg("--data")
            .arg(repo_path("data/antidepressant_synthetic.csv")),
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("60 studies"), "unexpected output: {text}");
    assert!(text.contains("5 clusters"));
}

#[test]
fn fit_curve_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let fit_dir = dir.path().join("fit");

    run_ok(
        drma()
            .arg("fit")
            .args(["--method", "binomial-bayes"])
            .arg("--data")
            .arg(&data)
            .args(["--transform", "linear", "--zero-dose"])
            .args(["--chains", "2", "--iterations", "3000", "--burn-in", "1000"])
            .args(["--seed", "9"])
            .arg("--out")
            .arg(&fit_dir),
    );
    for file in ["manifest.json", "summary.json", "draws.csv", "diagnostics.json", "parameters.csv"] {
        assert!(fit_dir.join(file).exists(), "missing {file}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["method"], "binomial-bayes");
    let names: Vec<&str> = summary["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"B1") && names.contains(&"tau") && names.contains(&"R0"));

    // curve over an explicit grid including dose zero
    let curve_dir = dir.path().join("curve");
    run_ok(
        drma()
            .arg("curve")
            .arg("--fit")
            .arg(&fit_dir)
            .args(["--grid", "0:8:1", "--absolute"])
            .arg("--out")
            .arg(&curve_dir),
    );
    let curve = std::fs::read_to_string(curve_dir.join("curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines.len(), 1 + 9, "header plus 9 grid rows");
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "0", "relative effect at dose 0 must be exactly 0");

    // diagnose the draws file
    let diag_dir = dir.path().join("diag");
    run_ok(
        drma()
            .arg("diagnose")
            .arg(fit_dir.join("draws.csv"))
            .arg("--out")
            .arg(&diag_dir),
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(diag_dir.join("report.json")).unwrap())
            .unwrap();
    let reported: Vec<&str> = report["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["parameter"].as_str().unwrap())
        .collect();
    // every sampled parameter appears in the report
    for name in ["B1", "tau", "u[1]", "u[2]", "u[3]", "R0", "sigma0"] {
        assert!(reported.contains(&name), "missing {name} in report");
    }
    assert!(diag_dir.join("traces.csv").exists());
    assert!(diag_dir.join("histograms.csv").exists());

    // threshold overrides are honored and recorded
    let diag2 = dir.path().join("diag2");
    run_ok(
        drma()
            .arg("diagnose")
            .arg(fit_dir.join("draws.csv"))
            .args(["--rhat-threshold", "1.2", "--geweke-threshold", "5.0"])
            .arg("--out")
            .arg(&diag2),
    );
    let report2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(diag2.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report2["rhat_threshold"], 1.2);
    assert_eq!(report2["geweke_threshold"], 5.0);
}

#[test]
fn fit_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut draws = Vec::new();
    // vary the thread count: outputs depend only on the seed
    for (name, threads) in [("a", "1"), ("b", "4")] {
        let out_dir = dir.path().join(name);
        run_ok(
            drma()
                .arg("fit")
                .args(["--method", "normal-bayes", "--transform", "linear"])
                .arg("--data")
                .arg(&data)
                .args(["--chains", "2", "--iterations", "2000", "--burn-in", "500"])
                .args(["--seed", "123", "--threads", threads])
                .arg("--out")
                .arg(&out_dir),
        );
        draws.push(std::fs::read(out_dir.join("draws.csv")).unwrap());
    }
    assert_eq!(
        draws[0], draws[1],
        "same seed must give identical draws regardless of threads"
    );
}

#[test]
fn onestage_fit_uses_se_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out_dir = dir.path().join("onestage");
    run_ok(
        drma()
            .arg("fit")
            .args(["--method", "onestage"])
            .arg("--data")
            .arg(&data)
            .args(["--knots", "3,5,8"])
            .args(["--seed", "4"])
            .arg("--out")
            .arg(&out_dir),
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    let b1 = &summary["parameters"][0];
    assert_eq!(b1["name"], "B1");
    assert!(b1.get("se").is_some(), "one-stage reports se");
    assert!(b1.get("sd").is_none(), "one-stage has no posterior sd");
    assert!(summary["loglik"].is_number());
}

#[test]
fn simulate_smoke_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sim");
    let base = |out: &Path| {
        let mut c = drma();
        c.arg("simulate")
            .args(["--suite", "table2", "--reps", "3"])
            .args(["--methods", "onestage"])
            .args(["--seed", "77"])
            .arg("--out")
            .arg(out);
        c
    };
    run_ok(&mut base(&out_dir));
    assert!(out_dir.join("metrics.json").exists());
    assert!(out_dir.join("metrics.csv").exists());
    assert!(out_dir.join("checkpoint.jsonl").exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    // 8 scenarios x 1 method x 2 parameters
    assert_eq!(report["rows"].as_array().unwrap().len(), 16);

    // resuming a finished run recomputes nothing and reproduces the report
    run_ok(base(&out_dir).arg("--resume"));
    let again = std::fs::read_to_string(out_dir.join("metrics.json")).unwrap();
    assert_eq!(metrics, again);
}

#[test]
fn errors_are_reported_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "study_id,cluster,dose,events,size\ns1,,0,210,200\ns1,,5,10,200\n",
    )
    .unwrap();
    let out = drma()
        .arg("fit")
        .args(["--method", "onestage", "--transform", "linear"])
        .arg("--data")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "error should name the row: {stderr}");

    // clustering without labels is a configuration error
    let data = small_dataset(dir.path());
    let no_cluster = dir.path().join("nc.csv");
    let stripped: String = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| {
            let mut parts: Vec<&str> = l.split(',').collect();
            parts[1] = "";
            parts.join(",") + "\n"
        })
        .collect();
    std::fs::write(&no_cluster, stripped).unwrap();
    let out = drma()
        .arg("fit")
        .args(["--method", "binomial-bayes", "--transform", "linear", "--clustered"])
        .args(["--chains", "2", "--iterations", "200", "--burn-in", "50"])
        .arg("--data")
        .arg(&no_cluster)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // absolute curve without a zero-dose fit
    let fit_dir = dir.path().join("pfit");
    run_ok(
        drma()
            .arg("fit")
            .args(["--method", "binomial-bayes", "--transform", "linear"])
            .arg("--data")
            .arg(&data)
            .args(["--chains", "2", "--iterations", "1000", "--burn-in", "200"])
            .arg("--out")
            .arg(&fit_dir),
    );
    let out = drma()
        .arg("curve")
        .arg("--fit")
        .arg(&fit_dir)
        .arg("--absolute")
        .arg("--out")
        .arg(dir.path().join("z"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn model_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let spec = serde_json::json!({
        "likelihood": "binomial",
        "link": "logit",
        "transform": {"kind": "rcs3", "knots": [3.0, 5.0, 8.0]},
        "coefficients": "random",
        "correlation": "zero",
        "clustered": false,
        "include_zero_dose_block": false
    });
    let spec_path = dir.path().join("model.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let out_dir = dir.path().join("fit");
    run_ok(
        drma()
            .arg("fit")
            .args(["--method", "binomial-bayes"])
            .arg("--data")
            .arg(&data)
            .arg("--model-json")
            .arg(&spec_path)
            .args(["--chains", "2", "--iterations", "1500", "--burn-in", "500"])
            .arg("--out")
            .arg(&out_dir),
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["model"]["correlation"], "zero");
    // no rho parameter is sampled under independent coefficients
    let draws = std::fs::read_to_string(out_dir.join("draws.csv")).unwrap();
    assert!(!draws.contains(",rho,"));
}
