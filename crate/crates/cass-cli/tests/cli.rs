//! End-to-end checks of the `cass` binary: each verb drives the library
//! through a desk-scale config and leaves the documented artifacts behind.

use std::path::Path;
use std::process::Command;

use tempfile::tempdir;

fn cass_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cass"))
}

/// Tiny two-seed siamese config; everything else defaulted.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(
        &path,
        format!(
            r#"
name = "cli_smoke"
method = "cass"
seeds = [0]
label_fractions = [1.0]
out_dir = "{out}"

[arm_a]
family = "cnn"
variant = "micro_cnn"
head_dim = 16
input_hw = [8, 8]

[arm_b]
family = "vit"
variant = "vit_tiny_p4"
head_dim = 16
input_hw = [8, 8]

[pretrain]
epochs = 1
batch_size = 8

[dino]
epochs = 1
batch_size = 8

[finetune]
max_epochs = 2
patience = 1

[augment]
target_size = [8, 8]

[dataset]
kind = "synthetic"
data_seed = 0
[dataset.synth]
n = 24
classes = 2
image_size = 8
"#,
            out = dir.join("results").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn run_and_report_verbs_produce_artifacts() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());

    let status = cass_bin()
        .args(["run", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    let results = dir.path().join("results");
    assert!(results.join("aggregate.json").exists());
    assert!(results.join("seed0/pretrain_record.json").exists());

    let status = cass_bin()
        .args(["report", "--from"])
        .arg(&results)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(results.join("report.md").exists());
}

#[test]
fn pretrain_then_finetune_verbs_chain() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());

    let output = cass_bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .args(["--seed", "1"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let checkpoint = dir.path().join("results/seed1/arm_a.ckpt");
    assert!(checkpoint.exists());

    let status = cass_bin()
        .args(["finetune", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(&checkpoint)
        .args(["--seed", "1", "--label-fraction", "0.5"])
        .arg("--out")
        .arg(dir.path().join("ft"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("ft/finetune_record.json").exists());
    assert!(dir.path().join("ft/finetuned.ckpt").exists());
}

#[test]
fn bad_config_fails_with_nonzero_exit() {
    let dir = tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "seeds = [1, 1]\n").unwrap();
    let output = cass_bin()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error:"), "{stderr}");
}
