use std::path::{Path, PathBuf};
use std::process::Command;

use bilevel_cli::commands::check::{default_targets, run_checks, CheckTarget};
use bilevel_cli::config::ExperimentConfig;
use bilevel_cli::error::{exit, CliError};
use bilevel_core::data::gen_linear;
use bilevel_core::problems::build_problem;
use bilevel_core::{BilevelProblem, DataView, ModelKind, ModelSpec, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bilevel"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    (out.status.code().unwrap(), stderr)
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().to_string(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

const SMALL_CLEAN: &str = r#"
seed = 3

[data]
source = "synthetic_classes"
n = 200
d = 5
classes = 3
separation = 1.5
n_test = 200

[data.corrupt]
p = 0.4

[clean]
trusted = 50

[split]
u = 3

[problem]
kind = "hyperclean_softmax"

[method]
k = 1
alpha_in = 0.5

[strategy]
kind = "oehg"
t = 300

[strategy.outer]
kind = "adam"
alpha_out = 0.1
"#;

#[test]
fn tune_reference_config_descends() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("ridge_tune.toml");
    let (code, err) = run(&["tune", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let mut rdr = csv::Reader::from_path(dir.path().join("trace.csv")).unwrap();
    let val: Vec<f64> = rdr
        .records()
        .map(|r| r.unwrap()[6].parse::<f64>().unwrap())
        .collect();
    assert_eq!(val.len(), 101);
    assert!(val.iter().all(|v| v.is_finite()));
    assert!(val[100] <= val[0], "{} > {}", val[100], val[0]);
}

#[test]
fn manifest_echo_reparses_to_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = configs().join("ridge_ehg.toml");
    let (code, err) = run(&["tune", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    let echo = manifest["config"].as_str().unwrap();
    let mut original = ExperimentConfig::load(&cfg_path).unwrap();
    original.resolve();
    let mut echoed = ExperimentConfig::from_toml(echo).unwrap();
    echoed.resolve();
    assert_eq!(original, echoed);
    let files: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(files, ["config.toml", "trace.csv", "final.json"]);
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let clean_cfg = write(tmp.path(), "clean.toml", SMALL_CLEAN);
    let ehg = configs().join("ridge_ehg.toml");
    let bv = configs().join("biasvar.toml");
    let cases: Vec<Vec<String>> = vec![
        vec!["tune".into(), "--config".into(), ehg.display().to_string()],
        vec![
            "biasvar".into(),
            "--config".into(),
            bv.display().to_string(),
            "--replicates".into(),
            "20".into(),
            "--grid".into(),
            "0.5:2:4".into(),
        ],
        vec!["clean".into(), "--config".into(), clean_cfg.display().to_string()],
        vec!["fpc".into(), "--n".into(), "6".into(), "--gamma".into(), "0.5".into(), "--u".into(), "3".into(), "--samples".into(), "1000".into()],
        vec!["check".into(), "--trials".into(), "2".into()],
    ];
    for (i, args) in cases.iter().enumerate() {
        let mut outputs = Vec::new();
        for workers in ["1", "3"] {
            let out = tmp.path().join(format!("run{i}_{workers}"));
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            full.extend(["--out", out.to_str().unwrap(), "--workers", workers]);
            let (code, err) = run(&full);
            assert_eq!(code, 0, "{args:?}: {err}");
            outputs.push(read_dir_sorted(&out));
        }
        assert!(!outputs[0].is_empty());
        assert_eq!(outputs[0], outputs[1], "{args:?}");
    }
}

#[test]
fn validation_failures_exit_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let t0 = write(
        tmp.path(),
        "t0.toml",
        "[data]\nsource = \"synthetic_linear\"\n[problem]\nkind = \"ridge\"\n[strategy]\nt = 0\n",
    );
    let (code, err) = run(&["tune", "--config", t0.to_str().unwrap(), "--out", out]);
    assert_eq!(code, exit::CONFIG);
    assert!(err.contains("strategy.t"), "{err}");

    let bv = configs().join("biasvar.toml");
    let (code, err) = run(&["biasvar", "--config", bv.to_str().unwrap(), "--replicates", "1", "--out", out]);
    assert_eq!(code, exit::CONFIG);
    assert!(err.contains("biasvar.replicates"), "{err}");

    let (code, err) = run(&["fpc", "--n", "40", "--gamma", "0.5", "--u", "1", "--out", out]);
    assert_eq!(code, exit::CONFIG);
    assert!(err.contains("enumeration too large"), "{err}");

    let typo = write(tmp.path(), "typo.toml", "[data]\nsource = \"synthetic_linear\"\n[problem]\nkind = \"ridgee\"\n");
    let (code, err) = run(&["tune", "--config", typo.to_str().unwrap(), "--out", out]);
    assert_eq!(code, exit::CONFIG);
    assert!(err.contains("problem.kind"), "{err}");
}

#[test]
fn numerical_failure_reports_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "div.toml",
        "[data]\nsource = \"synthetic_linear\"\n[problem]\nkind = \"ridge\"\n[method]\nalpha_in = 50.0\nk = 200\n[strategy]\nt = 3\n",
    );
    let out = tmp.path().join("out");
    let (code, err) = run(&["tune", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, exit::NUMERICAL);
    assert!(err.contains("outer step 0"), "{err}");
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
}

#[test]
fn libsvm_input_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, _) = gen_linear(60, 3, 1, 0.2, 2).unwrap();
    let mut text = String::new();
    for i in 0..ds.len() {
        let row = ds.features().row(i);
        text.push_str(&format!("{} 1:{} 2:{} 3:{}\n", ds.labels()[i], row[0], row[1], row[2]));
    }
    let data = write(tmp.path(), "data.svm", &text);
    let cfg = write(
        tmp.path(),
        "svm.toml",
        &format!(
            "[data]\nsource = \"libsvm\"\npath = {:?}\nlabel_mode = \"regression\"\ntest_fraction = 0.2\n[problem]\nkind = \"ridge\"\n[method]\nk = 20\n[strategy]\nt = 5\n",
            data.display().to_string()
        ),
    );
    let out = tmp.path().join("out");
    let (code, err) = run(&["tune", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let fin: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("final.json")).unwrap()).unwrap();
    assert!(fin["final_test_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn cleaner_downweights_corrupted_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "clean.toml", SMALL_CLEAN);
    let out = tmp.path().join("out");
    let (code, err) = run(&["clean", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("clean_report.json")).unwrap()).unwrap();
    let bad = r["mean_weight_corrupted"].as_f64().unwrap();
    let good = r["mean_weight_clean"].as_f64().unwrap();
    assert!(bad < good, "{bad} vs {good}");
    let mut rdr = csv::Reader::from_path(out.join("weights.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["sample_id", "raw_weight", "sigmoid_weight", "is_clean_truth"]
    );
    assert_eq!(rdr.records().count(), 150);
}

#[test]
fn clean_without_corruption_reports_f1_not_applicable() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL_CLEAN.replace("p = 0.4", "p = 0.0").replace("t = 300", "t = 20");
    let cfg = write(tmp.path(), "clean.toml", &text);
    let out = tmp.path().join("out");
    let (code, err) = run(&["clean", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("not applicable"), "{err}");
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("clean_report.json")).unwrap()).unwrap();
    assert!(r["f1"].is_null());
}

/// Ridge with a wrong inner gradient.
struct BrokenGradient(Box<dyn BilevelProblem>);

impl BilevelProblem for BrokenGradient {
    fn name(&self) -> &str {
        "broken_ridge"
    }
    fn hyper_dim(&self) -> usize {
        self.0.hyper_dim()
    }
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }
    fn inner_loss(&self, h: &[f64], t: &[f64], d: &DataView) -> f64 {
        self.0.inner_loss(h, t, d)
    }
    fn inner_grad_theta(&self, h: &[f64], t: &[f64], d: &DataView) -> Vec<f64> {
        self.0.inner_grad_theta(h, t, d).into_iter().map(|g| 1.1 * g).collect()
    }
    fn inner_hvp(&self, h: &[f64], t: &[f64], d: &DataView, v: &[f64]) -> Vec<f64> {
        self.0.inner_hvp(h, t, d, v)
    }
    fn inner_mixed_vp(&self, h: &[f64], t: &[f64], d: &DataView, v: &[f64]) -> Vec<f64> {
        self.0.inner_mixed_vp(h, t, d, v)
    }
    fn outer_loss(&self, h: &[f64], t: &[f64], d: &DataView) -> f64 {
        self.0.outer_loss(h, t, d)
    }
    fn outer_grad_theta(&self, h: &[f64], t: &[f64], d: &DataView) -> Vec<f64> {
        self.0.outer_grad_theta(h, t, d)
    }
    fn outer_grad_lambda(&self, h: &[f64], t: &[f64], d: &DataView) -> Vec<f64> {
        self.0.outer_grad_lambda(h, t, d)
    }
}

#[test]
fn corrupted_gradient_fails_named_check() {
    let (data, _) = gen_linear(24, 3, 1, 0.3, 2).unwrap();
    let ridge = build_problem(&ModelSpec::new(ModelKind::Ridge), 3, 0).unwrap();
    let target = CheckTarget {
        problem: Box::new(BrokenGradient(ridge)),
        data,
        split: Split::new((0..16).collect(), (16..24).collect(), 0).unwrap(),
    };
    let report = run_checks(&[target], 3, 1).unwrap();
    assert!(!report.passed);
    let failures = report.failures();
    assert!(failures.contains(&"broken_ridge/inner_grad_theta".to_string()), "{failures:?}");
    assert_eq!(CliError::CheckFailed(failures).exit_code(), exit::CHECK_FAILED);
}

#[test]
fn check_report_schema_is_stable() {
    let a = run_checks(&default_targets(0).unwrap(), 2, 5).unwrap();
    let b = run_checks(&default_targets(0).unwrap(), 2, 5).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let v = serde_json::to_value(&a).unwrap();
    let keys: Vec<&String> = v["checks"][0].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["error", "name", "passed", "threshold"]);
}
