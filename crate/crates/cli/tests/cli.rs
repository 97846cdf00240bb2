//! Drives the `tod` binary: exit codes, refusal to overwrite, and the run
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "[run]\ndir = run\n\
[data]\nsize = 32\nn_train = 6\nn_val = 2\nn_test = 3\nseed = 3\n\
[networks]\ndenoiser_channels = 8,1\nsegmenters = unet_small,dilated_cnn\nrepresentative = unet_small\n\
[segmenter]\nepochs = 1\n\
[training]\nepochs = 2\n\
[evaluation]\ngradmap_cases = 2\n";

fn tod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tod")).args(args).env("TOD_THREADS", "1").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nsiez = 32\n");
    let o = tod(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.siez"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[data]\nsize = 30\n");
    assert_eq!(tod(&["gen-data", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));

    let missing = dir.path().join("absent.cfg");
    assert_eq!(tod(&["evaluate", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(tod(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn default_config_round_trips_through_the_binary() {
    let o = tod(&["default-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text, tod_cli::config::default_config_text());
    let shipped = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg")).unwrap();
    assert_eq!(shipped, text);
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    assert!(tod(&["gen-data", "--config", c]).status.success());
    let again = tod(&["gen-data", "--config", c]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    assert!(tod(&["gen-data", "--config", c, "--force"]).status.success());
}

#[test]
fn tod_training_requires_a_segmenter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    assert!(tod(&["gen-data", "--config", c]).status.success());
    let o = tod(&["train-denoiser", "--config", c, "--variant", "tod"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("segmenter"), "{}", stderr(&o));
}

#[test]
fn stages_before_data_exist_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = tod(&["pretrain-seg", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_tod")).arg("default-config").env("TOD_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reproduce_writes_a_manifest_covering_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = cfg.to_str().unwrap();
    let o = tod(&["reproduce", "--config", c]);
    // A two-epoch run is far too short for the directional checks.
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for n in 3..=6 {
        assert!(stdout.contains(&format!("criterion {n} ")), "{stdout}");
    }

    let run = dir.path().join("run");
    let m: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    let names: Vec<&str> = m["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["gen-data", "pretrain-seg", "train-denoiser-tod", "train-denoiser-mse_only", "evaluate", "gradmaps"]
    );
    for stage in m["stages"].as_array().unwrap() {
        let outputs = stage["outputs"].as_array().unwrap();
        assert!(!outputs.is_empty(), "{stage}");
        for f in outputs {
            let path = run.join(f["path"].as_str().unwrap());
            assert!(path.is_file(), "{}", path.display());
            assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
        }
    }
    for f in ["quality.csv", "dice.csv", "significance.csv", "summary.txt", "roi_mass.csv"] {
        assert!(run.join("results").join(f).is_file(), "{f}");
    }

    let again = tod(&["reproduce", "--config", c]);
    assert_eq!(again.status.code(), Some(1));
}
