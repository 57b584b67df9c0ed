//! Every JSON document the CLI writes validates against the shipped schemas.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use dualfilter::acceptance::{CriterionReport, Profile, SuiteReport};
use dualfilter::config::{canonical_config, Tolerances};
use serde_json::{json, Value};

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&doc).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn check(schema_name: &str, doc: &Value) {
    let v = schema(schema_name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:#?}\n{doc:#}");
}

fn check_file(schema_name: &str, path: &Path) {
    let doc: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    check(schema_name, &doc);
}

fn cli(dir: &Path, cfg: &Value, args: &[&str]) {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dualfilter"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .env_remove("DUALFILTER_OUT")
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn configs_validate() {
    let full = canonical_config(100, 3);
    check("config.schema.json", &serde_json::to_value(&full).unwrap());
    check("config.schema.json", &json!({"model": {"kind": "canonical"}, "grid": {"T": 1.0, "n_steps": 10},
                                        "bundle": {"n_paths": 1, "seed": 0}}));
    let bad = json!({"model": {"kind": "canonical"}, "grid": {"T": 1.0, "n_steps": 10},
                     "bundle": {"n_paths": 1, "seed": 0}, "extra": 1});
    assert!(!schema("config.schema.json").is_valid(&bad));
    let bad_tol = json!({"model": {"kind": "canonical"}, "grid": {"T": 1.0, "n_steps": 10},
                         "bundle": {"n_paths": 1, "seed": 0}, "tolerances": {"gap_se": -1.0}});
    assert!(!schema("config.schema.json").is_valid(&bad_tol));
}

#[test]
fn example_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let schema_name = if name.starts_with("model_") { "model.schema.json" } else { "config.schema.json" };
            check_file(schema_name, &p);
            seen += 1;
        }
    }
    assert!(seen >= 3, "{seen} configs in {}", dir.display());
}

#[test]
fn finite_model_outputs_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = json!({
        "model": {"kind": "canonical"},
        "grid": {"T": 1.0, "n_steps": 100},
        "bundle": {"n_paths": 60, "seed": 5, "export_paths": 2},
        "policy": {"kind": "optimal", "pde_nodes": 51},
        "dual": {"iterations": 2}
    });
    cli(dir, &cfg, &["simulate"]);
    for kind in ["wonham", "mc_kalman"] {
        cli(dir, &cfg, &["filter", "--kind", kind]);
    }
    for action in ["cost", "gap", "policy_iter", "martingale", "synthesis"] {
        cli(dir, &cfg, &["dual", "--action", action]);
    }
    cfg["policy"] = json!({"kind": "random", "amplitude": 0.5, "seed": 1});
    cli(dir, &cfg, &["dual", "--action", "cost"]);
    cli(dir, &cfg, &["lq"]);

    let out = dir.join("out");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    check("manifest.schema.json", &manifest);
    assert_eq!(manifest["model"]["kind"], "finite");
    for kind in ["wonham", "mc_kalman"] {
        check_file("filter_summary.schema.json", &out.join(format!("filter_{kind}/summary.json")));
    }
    let mut reports: Vec<PathBuf> = fs::read_dir(out.join("dual"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    reports.sort();
    assert_eq!(reports.len(), 5);
    for p in &reports {
        check_file("dual_report.schema.json", p);
    }
    check_file("lq_solution.schema.json", &out.join("lq/solution.json"));
}

#[test]
fn linear_gaussian_and_diffusion_outputs_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let lg = json!({
        "model": {"kind": "linear_gaussian", "A": [[-1.0]], "H": [[1.0]], "Q": [[1.0]], "R": [[0.5]],
                  "m0": [0.0], "Sigma0": [[1.0]], "T": 1.0},
        "grid": {"T": 1.0, "n_steps": 100},
        "bundle": {"n_paths": 20, "seed": 5, "export_paths": 1}
    });
    cli(dir, &lg, &["simulate"]);
    cli(dir, &lg, &["filter", "--kind", "kalman"]);
    cli(dir, &lg, &["lq"]);
    let out = dir.join("out");
    check_file("manifest.schema.json", &out.join("manifest.json"));
    check_file("filter_summary.schema.json", &out.join("filter_kalman/summary.json"));
    check_file("lq_solution.schema.json", &out.join("lq/solution.json"));

    let diffusion = json!({
        "model": {"kind": "diffusion",
                  "drift": {"kind": "affine", "slope": -1.0, "intercept": 0.0},
                  "sigma": {"kind": "constant", "value": 1.0},
                  "obs": [{"kind": "affine", "slope": 1.0, "intercept": 0.0}],
                  "R": [[0.5]],
                  "prior": {"kind": "gaussian", "mean": 0.0, "std": 1.0},
                  "domain": [-5.0, 5.0], "T": 1.0},
        "grid": {"T": 1.0, "n_steps": 100},
        "bundle": {"n_paths": 5, "seed": 5, "export_paths": 1},
        "filter": {"grid_nodes": 51}
    });
    cli(dir, &diffusion, &["simulate"]);
    cli(dir, &diffusion, &["filter", "--kind", "grid_kushner"]);
    check_file("manifest.schema.json", &out.join("manifest.json"));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("filter_grid_kushner/summary.json")).unwrap()).unwrap();
    check("filter_summary.schema.json", &summary);
    assert_eq!(summary["comparison"]["reference"], "kalman");
}

#[test]
fn acceptance_report_validates() {
    let sizes = Profile::Quick.sizes();
    let mut metrics = BTreeMap::new();
    metrics.insert("gap".to_string(), 1e-4);
    metrics.insert("undefined".to_string(), f64::NAN);
    let c = CriterionReport { id: 1, name: "x".into(), pass: true, metrics, detail: "d".into() };
    assert!(c.line(Duration::from_millis(1500)).starts_with("criterion  1 PASS x (1.5 s)"));
    let report = SuiteReport {
        profile: Profile::Quick,
        seed: 1,
        tolerances: Tolerances::default(),
        sizes,
        criteria: vec![c],
        pass: true,
    };
    check("acceptance.schema.json", &serde_json::to_value(&report).unwrap());
}
