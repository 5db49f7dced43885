use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
problem = "richards"
seed = 7
output = "unused"

[grid]
fine_nx = 10
fine_ny = 10
coarse_nx = 5
coarse_ny = 5

[fractures]
segments = [[0.23, 0.47, 0.77, 0.53]]

[field]
k_fracture = 1e3
spec = { type = "log-normal", lx = 0.2, ly = 0.2, variance = 1.0 }

[sources]
n_snapshots = 2
n_test = 2
q_min = 50.0
q_max = 60.0
wells = [{ i = 1, j = 1, sign = 1.0 }, { i = 3, j = 3, sign = -1.0 }]

[time]
tau = 1e-3
n_steps = 4

[dataset]
min_difference = { mm-horizontal = 1e-6, mm-vertical = 1e-6, mf = 1e-6 }

[train]
epochs = 3
batch_size = 8

[train.arch]
fine_maps = [2, 2]
coarse_maps = [2, 2]
branch_width = 4
trunk_width = 8

[thresholds]
eps = { mm-horizontal = 1e-8, mm-vertical = 1e-8, mf = 1e-8 }
"#;

fn nlup(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_nlup"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn train_without_dataset_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = nlup(dir.path(), &["train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("build-dataset"), "{err}");
}

#[test]
fn solve_coarse_without_upscale_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = nlup(dir.path(), &["solve-coarse"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("upscale"), "{err}");
}

#[test]
fn missing_config_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_nlup")).arg("report").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn stages_in_order_then_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["simulate-fine", "upscale", "build-dataset", "train", "solve-coarse"] {
        let out = nlup(dir.path(), &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let first = nlup(dir.path(), &["report"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let table = String::from_utf8_lossy(&first.stdout).to_string();
    assert!(table.contains("median"), "{table}");
    let csv = std::fs::read(dir.path().join("out/report/summary.csv")).unwrap();
    for sub in ["fine", "upscale", "dataset", "models", "coarse", "report"] {
        assert!(dir.path().join("out").join(sub).join("provenance.json").exists(), "{sub}");
    }

    let again = tempfile::tempdir().unwrap();
    let all = nlup(again.path(), &["all"]);
    assert!(all.status.success(), "{}", String::from_utf8_lossy(&all.stderr));
    assert_eq!(String::from_utf8_lossy(&all.stdout), table);
    assert_eq!(std::fs::read(again.path().join("out/report/summary.csv")).unwrap(), csv);
}
