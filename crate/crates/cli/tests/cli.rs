use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn sketchparse(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sketchparse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            r#"
train_data = "train.jsonl"
test_data = "test.jsonl"
label_space = "train.labels.json"
output_dir = "out"
seed = 2
epochs = 2
batch_size = 4
{extra}
[model]
width = 8
layers = 1
attention_heads = 2
memory_heads = 2
max_strokes = 16
"#
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn synth(dir: &Path) {
    let spec = dir.join("spec.toml");
    fs::write(
        &spec,
        "num_categories = 3\nnum_components = 4\nsamples_per_category = 5\n",
    )
    .unwrap();
    let (ok, _, err) = sketchparse(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        dir.join("train.jsonl").to_str().unwrap(),
        "--train-per-category",
        "3",
        "--test-out",
        dir.join("test.jsonl").to_str().unwrap(),
    ]);
    assert!(ok, "{err}");
    assert!(dir.join("train.labels.json").exists());
    assert_eq!(
        fs::read_to_string(dir.join("train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        9
    );
    assert_eq!(
        fs::read_to_string(dir.join("test.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}

#[test]
fn synth_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = write_config(dir.path(), "scenario = \"labels_full\"");
    let (ok, stdout, err) = sketchparse(&["train", "--config", &config]);
    assert!(ok, "{err}");
    let best: Value = serde_json::from_str(&stdout).unwrap();

    let out = dir.path().join("out");
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["l1", "l2", "l4", "l5"] {
        assert!(first["loss"][key].is_number(), "{key} missing");
    }
    assert!(first["loss"]["l6"].is_null());

    let ckpt = out.join("best.ckpt");
    let test = dir.path().join("test.jsonl");
    let (ok, stdout, err) = sketchparse(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
    ]);
    assert!(ok, "{err}");
    let eval: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(eval, best);

    let export = dir.path().join("export");
    let (ok, _, err) = sketchparse(&[
        "export",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--out",
        export.to_str().unwrap(),
    ]);
    assert!(ok, "{err}");
    let dump = fs::read_to_string(export.join("features.tsv")).unwrap();
    assert!(dump.lines().count() > 1 + 4 * 2);
}

#[test]
fn sweep_emits_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = write_config(dir.path(), "scenario = \"labels_full\"\nepochs = 1\n");
    let config_text = fs::read_to_string(&config)
        .unwrap()
        .replace("epochs = 2\n", "");
    fs::write(&config, config_text).unwrap();
    let (ok, stdout, err) = sketchparse(&["sweep", "--config", &config]);
    assert!(ok, "{err}");
    assert_eq!(stdout.lines().count(), 10);
    let written = fs::read_to_string(dir.path().join("out").join("sweep.jsonl")).unwrap();
    assert_eq!(written.lines().count(), 10);
    for line in written.lines() {
        let row: Value = serde_json::from_str(line).unwrap();
        assert!(row["metrics"]["acc_at_1"].is_number());
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, _, err) = sketchparse(&[
        "train",
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert!(!ok);
    assert!(err.contains("error"));

    synth(dir.path());
    let config = write_config(
        dir.path(),
        "scenario = \"prior_info\"\nfusion = \"keys_only\"",
    );
    let (ok, _, err) = sketchparse(&["train", "--config", &config]);
    assert!(!ok);
    assert!(err.contains("keys_only"), "{err}");

    let (ok, _, _) = sketchparse(&[
        "eval",
        "--checkpoint",
        "/nonexistent",
        "--data",
        "/nonexistent",
    ]);
    assert!(!ok);
}
