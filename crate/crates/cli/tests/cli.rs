use std::path::Path;
use std::process::{Command, Output};

fn aalab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aalab")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A desk-derived config small enough to run every stage in seconds.
fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "scenario": "desk",
        "global_seed": 5,
        "output_dir": dir.join("run"),
        "sampling": { "range_um": 5.0, "step_um": 1.0 },
        "sizes": { "m_tolerance_lenses": 1, "n_test": 1, "n_oracle": 1, "n_random": 8 },
        "source_domain": { "image_side": 32 },
        "target_domain": { "image_side": 32 },
        "transform": {
            "generator": { "image_side": 32, "base_channels": 4, "codebook_size": 8, "code_dim": 4 },
            "training": { "iterations": 3, "batch_size": 2 }
        },
        "aligner": {
            "arch": { "image_side": 32, "label_scale": 5.0, "base_channels": 2, "feature_dim": 8, "hidden_dim": 6 },
            "training": { "iterations": 3, "batch_size": 4 }
        }
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"scenario":"desk","stepsize":3}"#).unwrap();
    let o = aalab(&["gen-data", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stepsize"), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn missing_config_fails() {
    let o = aalab(&["gen-data"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn eval_before_train_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(aalab(&["gen-data", "--config", &cfg]).status.success());
    let o = aalab(&["eval", "--config", &cfg, "--preset", "DA3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing prerequisite"), "{}", stderr(&o));
    assert!(stderr(&o).contains("model.ckpt"), "{}", stderr(&o));
    let o = aalab(&["translate", "--config", &cfg]);
    assert!(stderr(&o).contains("generator.ckpt"), "{}", stderr(&o));
}

#[test]
fn gen_data_twice_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let first = aalab(&["gen-data", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("gen-data: done"));
    let manifest = dir.path().join("run/data/source/manifest.json");
    let before = (std::fs::read(&manifest).unwrap(), std::fs::metadata(&manifest).unwrap().modified().unwrap());
    let second = aalab(&["gen-data", "--config", &cfg]);
    assert!(stdout(&second).contains("gen-data: up to date"), "{}", stdout(&second));
    let after = (std::fs::read(&manifest).unwrap(), std::fs::metadata(&manifest).unwrap().modified().unwrap());
    assert_eq!(before, after);
    let log = std::fs::read_to_string(dir.path().join("run/stage.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(dir.path().join("run/config.resolved.json").exists());

    // A different seed is a different dataset.
    let third = aalab(&["gen-data", "--config", &cfg, "--seed", "6"]);
    assert!(stdout(&third).contains("gen-data: done"));
}

#[test]
fn run_all_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = aalab(&["run-all", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["OnDevice(1)", "OnDeviceSparse(1)", "SimulationNoTol", "Simulation", "DA3NoTol", "DA3"]);
    for f in ["report.json", "per_lens.csv", "heatmap.csv", "heatmap.png", "adjust.json"] {
        assert!(dir.path().join("run/eval/da3").join(f).exists(), "{f}");
    }
    // Everything is up to date the second time.
    let again = aalab(&["run-all", "--config", &cfg]);
    assert!(again.status.success());
    let log = std::fs::read_to_string(dir.path().join("run/stage.log")).unwrap();
    let second_half: Vec<&str> = log.lines().skip(log.lines().count() / 2).collect();
    assert!(second_half.iter().filter(|l| !l.contains(" report ")).all(|l| l.contains("up-to-date")), "{log}");

    let single = aalab(&["eval", "--config", &cfg, "--preset", "Simulation"]);
    assert!(stdout(&single).contains("MAE x"), "{}", stdout(&single));
    let bad = aalab(&["eval", "--config", &cfg, "--preset", "DA4"]);
    assert!(!bad.status.success());
}
