//! End-to-end runs of the `patchvq` binary against a tiny synthetic
//! dataset in the CIFAR-10 batch format.

use std::path::Path;
use std::process::Command;

const RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Deterministic pseudo-random batch files; labels cycle 0..10 and the
/// pixel distribution depends weakly on the label so training has signal.
fn write_batch(path: &Path, count: usize, seed: u64) {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut bytes = Vec::with_capacity(count * RECORD_LEN);
    for i in 0..count {
        let label = (i % 10) as u8;
        bytes.push(label);
        for _ in 0..RECORD_LEN - 1 {
            let noise = (next() % 200) as u8;
            bytes.push(noise.saturating_add(label * 5));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn write_dataset(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 1..=5 {
        write_batch(&dir.join(format!("data_batch_{i}.bin")), 40, i);
    }
    write_batch(&dir.join("test_batch.bin"), 40, 77);
}

fn write_config(path: &Path, root: &Path) {
    let text = format!(
        r#"
dataset_root = "{data}"
output_root = "{runs}"
artifacts_dir = "{artifacts}"

[dictionary]
size = 16
moment_sample = 2000

[train]
epochs = 2
decay_epochs = [1]
batch_size = 16

[analysis]
patch_sides = [4]
moment_sample = 2000
knn_sample = 400
neighbor_horizon = 50
anchor_budget = 20
"#,
        data = root.join("data").display(),
        runs = root.join("runs").display(),
        artifacts = root.join("artifacts").display(),
    );
    std::fs::write(path, text).unwrap();
}

fn patchvq(config: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_patchvq"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn assert_success(out: &std::process::Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_runs_and_produces_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data"));
    let config = tmp.path().join("config.toml");
    write_config(&config, tmp.path());

    let out = patchvq(&config, &["build-dict"]);
    assert_success(&out, "build-dict");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("|D|=16"), "summary line missing: {stdout}");
    assert!(tmp.path().join("artifacts/dictionary.bin").exists());
    assert!(tmp.path().join("artifacts/whitening.bin").exists());

    let out = patchvq(&config, &["encode"]);
    assert_success(&out, "encode");
    assert!(tmp.path().join("artifacts/train.cache").exists());
    assert!(tmp.path().join("artifacts/test.cache").exists());
    // pooled shape [2|D|, 8, 8] for P=6, k1=5, s1=3 on 32x32 inputs
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("[32, 8, 8]"),
        "unexpected encode output: {}",
        String::from_utf8_lossy(&out.stdout)
    );

    // a second encode is a no-op
    let out = patchvq(&config, &["encode"]);
    assert_success(&out, "re-encode");
    assert!(String::from_utf8_lossy(&out.stdout).contains("cache complete, skipping"));

    let out = patchvq(&config, &["train"]);
    assert_success(&out, "train");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("test accuracy:"), "no accuracy line: {stdout}");
    assert!(tmp.path().join("artifacts/model.bin").exists());

    // metrics CSV has the documented header and one row per epoch
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("train-"))
        .collect();
    assert_eq!(runs.len(), 1);
    let metrics = std::fs::read_to_string(runs[0].join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,lr,trainLoss,trainAcc,testAcc,wallSeconds");
    assert_eq!(lines.len(), 3);
    // the effective config is echoed into the run directory
    assert!(runs[0].join("config.toml").exists());

    let out = patchvq(&config, &["evaluate"]);
    assert_success(&out, "evaluate");
    assert!(String::from_utf8_lossy(&out.stdout).contains("test accuracy:"));
}

#[test]
fn analyze_writes_dimension_and_spectrum_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data"));
    let config = tmp.path().join("config.toml");
    write_config(&config, tmp.path());

    let out = patchvq(&config, &["analyze"]);
    assert_success(&out, "analyze");
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("analyze-"))
        .collect();
    assert_eq!(runs.len(), 1);
    let dims = std::fs::read_to_string(runs[0].join("dimensions.csv")).unwrap();
    assert!(dims.starts_with("P,dExt,dCovRaw,dCovWhite,dIntRaw,dIntWhite\n"));
    assert_eq!(dims.lines().count(), 2);
    let spectrum = std::fs::read_to_string(runs[0].join("spectrum-p4.csv")).unwrap();
    assert!(spectrum.starts_with("index,value\n"));
    assert_eq!(spectrum.lines().count(), 1 + 3 * 4 * 4);
}

#[test]
fn ablate_runs_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data"));
    let config = tmp.path().join("config.toml");
    write_config(&config, tmp.path());

    let out = patchvq(&config, &["ablate", "--axis", "dict-size", "--values", "8,16"]);
    assert_success(&out, "ablate");
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("ablate-"))
        .collect();
    assert_eq!(runs.len(), 1);
    let csv = std::fs::read_to_string(runs[0].join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,value,testAcc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("DictSize,8,"));
    assert!(lines[2].starts_with("DictSize,16,"));
}

#[test]
fn missing_dataset_fails_with_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.toml");
    write_config(&config, tmp.path()); // no dataset written

    let out = patchvq(&config, &["build-dict"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error["), "stderr: {stderr}");
}

#[test]
fn override_flags_change_the_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data"));
    let config = tmp.path().join("config.toml");
    write_config(&config, tmp.path());

    let out = patchvq(
        &config,
        &["--dict-size", "8", "--patch-size", "5", "--gaussian", "build-dict"],
    );
    assert_success(&out, "build-dict with overrides");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("|D|=8"), "{stdout}");
    assert!(stdout.contains("P=5"), "{stdout}");
    assert!(stdout.contains("gaussian"), "{stdout}");
}

#[test]
fn deterministic_training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data"));
    let config = tmp.path().join("config.toml");
    write_config(&config, tmp.path());
    assert_success(&patchvq(&config, &["build-dict"]), "build-dict");
    assert_success(&patchvq(&config, &["encode"]), "encode");

    let accuracy = |out: &std::process::Output| {
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .find(|l| l.starts_with("test accuracy:"))
            .unwrap()
            .to_string()
    };
    let a = patchvq(&config, &["--deterministic", "train"]);
    assert_success(&a, "first deterministic train");
    let b = patchvq(&config, &["--deterministic", "train"]);
    assert_success(&b, "second deterministic train");
    assert_eq!(accuracy(&a), accuracy(&b));
}
