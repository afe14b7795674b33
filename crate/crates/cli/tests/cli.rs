//! Command-line behavior: exit codes, stage selection, sweeps and export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "closure-small"
seed = 3

[system]
type = "closure"
mu = -0.1
nu = -1.0

[data]
ranges = [[-1.0, 1.0], [-1.0, 1.0]]
counts = [9, 9]
subgrid = { offset = 0, step = 2 }
dt = 0.2
n_samples = 60
reference = [-1.0, -1.0]

[search]
n_free_pairs = 1
re_bounds = [-2.0, -0.1]
im_bounds = [0.0, 1.0]
fixed = [[-0.1, 0.0], [-1.0, 0.0]]

[cost]
interp_counts = [30, 30]

[optimizer]
pop_size = 8
generations = 4
nm_iters = 40
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_koopman-eig"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_validate() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["closure", "fhn", "vdp", "duffing"] {
        let o = run(&["validate-config", s(&configs.join(format!("{name}.toml")))]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&run(&["validate-config", s(&missing)])), 2);

    let unknown = write_config(dir.path(), "unknown.toml", &format!("{SMALL}\n[extra]\nx = 1\n"));
    assert_eq!(code(&run(&["run", s(&unknown)])), 2);

    let bad_dt = write_config(dir.path(), "dt.toml", &SMALL.replace("dt = 0.2", "dt = -0.2"));
    let o = run(&["validate-config", s(&bad_dt)]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());

    let cfg = write_config(dir.path(), "ok.toml", SMALL);
    assert_eq!(code(&run(&["sweep", s(&cfg), "--axis", "warp", "--values", "1"])), 2);
}

#[test]
fn stage_failures_use_stage_exit_codes() {
    // the closure system does not oscillate, so frequency estimation fails
    // inside the optimize stage
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("n_free_pairs = 1", "n_free_pairs = 1\nfundamental_from = 0");
    let cfg = write_config(dir.path(), "osc.toml", &text);
    let out = dir.path().join("out");
    let o = run(&["run", s(&cfg), "--stage", "optimize", "--out", s(&out)]);
    assert_eq!(code(&o), 11, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("ensemble.csv").exists(), "earlier stage artifacts are kept");
}

#[test]
fn simulate_stage_writes_only_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = run(&["run", s(&cfg), "--stage", "simulate", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["ensemble.csv", "manifest.json", "timings.json"]);

    let mut r = csv::Reader::from_path(out.join("ensemble.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["trajectory", "t", "x1", "x2"]);
    assert_eq!(r.records().count(), 81 * 60);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["stages"], serde_json::json!(["simulate"]));
}

#[test]
fn seed_override_changes_the_manifest_hash_only_through_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let read = |out: &Path| -> serde_json::Value {
        serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        assert_eq!(code(&run(&["run", s(&cfg), "--stage", "simulate", "--seed", seed, "--out", s(out)])), 0);
    }
    assert_eq!(read(&a)["config_hash"], read(&b)["config_hash"], "output directory is not part of the hash");
    assert_ne!(read(&a)["config_hash"], read(&c)["config_hash"]);
}

#[test]
fn single_point_sweep_matches_plain_run_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let plain = dir.path().join("plain");
    let swept = dir.path().join("swept");
    assert_eq!(code(&run(&["run", s(&cfg), "--stage", "optimize", "--out", s(&plain)])), 0);
    let o = run(&["sweep", s(&cfg), "--axis", "gamma", "--values", "1e-4", "--out", s(&swept)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["eigenvalues.json", "costs.json", "phi0.csv"] {
        assert_eq!(fs::read(plain.join(f)).unwrap(), fs::read(swept.join("point_0").join(f)).unwrap(), "{f}");
    }
    let mut table = csv::Reader::from_path(swept.join("sweep.csv")).unwrap();
    assert_eq!(table.headers().unwrap().get(0), Some("axis"));
    let rows: Vec<csv::StringRecord> = table.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "gamma");

    let model = dir.path().join("model.json");
    assert_eq!(code(&run(&["export-model", s(&plain), "--out", s(&model)])), 0);
    let bundle: serde_json::Value = serde_json::from_slice(&fs::read(&model).unwrap()).unwrap();
    for key in ["manifest", "eigenvalues", "spectral_model"] {
        assert!(bundle.get(key).is_some(), "missing {key}");
    }

    // a run directory without a model cannot be exported
    let sim_only = dir.path().join("sim");
    assert_eq!(code(&run(&["run", s(&cfg), "--stage", "simulate", "--out", s(&sim_only)])), 0);
    assert_eq!(code(&run(&["export-model", s(&sim_only)])), 1);
}
