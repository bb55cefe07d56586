//! End-to-end tests of the `weightgen` binary: exit codes, artifact layout,
//! reproducibility, and the single-sample evaluation identity.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_weightgen"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn assert_ok(out: &Output) {
    assert_eq!(
        code(out),
        0,
        "expected success\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A toy configuration small enough for seconds-scale training.
fn tiny_toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.json");
    std::fs::write(
        &path,
        r#"{
            "experiment": "toy",
            "train": { "steps": 25, "z_batch": 16, "lambda": 30.0,
                       "diversity": "l2_reg", "gauge": false,
                       "adam": { "learning_rate": 0.001 } },
            "analysis": { "toy_profile_points": 40, "sample_count": 12,
                          "pca_components": 2 },
            "seed": 7,
            "out_dir": "out"
        }"#,
    )
    .unwrap();
    path
}

/// A classifier configuration with a tiny corpus and a 2-step run.
fn tiny_mnist_config(dir: &Path) -> PathBuf {
    let path = dir.join("mnist.json");
    std::fs::write(
        &path,
        r#"{
            "experiment": "mnist",
            "train": { "steps": 2, "z_batch": 2, "images_per_z": 2,
                       "lambda": 1000.0, "diversity": "weight_entropy",
                       "gauge": true },
            "data": { "dir": "data", "train_count": 120, "test_count": 60 },
            "analysis": { "sample_count": 3, "histogram_bins": 5,
                          "eval_chunk": 64 },
            "seed": 3,
            "out_dir": "out"
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);
    let out = bin().arg("--version").output().unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn bad_usage_exits_one() {
    // No subcommand at all.
    let out = bin().output().unwrap();
    assert_eq!(code(&out), 1);
    // Unknown subcommand.
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(code(&out), 1);
    // Missing --config.
    let out = bin().arg("train").output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // Nonexistent config file.
    let out = run_in(dir.path(), &["--config", "nope.json", "train"]);
    assert_eq!(code(&out), 2);
    // Malformed JSON.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    let out = run_in(dir.path(), &["--config", "bad.json", "train"]);
    assert_eq!(code(&out), 2);
    // Schema violation: negative λ.
    std::fs::write(&bad, r#"{"experiment":"toy","train":{"lambda":-1.0}}"#).unwrap();
    let out = run_in(dir.path(), &["--config", "bad.json", "train"]);
    assert_eq!(code(&out), 2);
    // Unknown key.
    std::fs::write(&bad, r#"{"experiment":"toy","surprise":1}"#).unwrap();
    let out = run_in(dir.path(), &["--config", "bad.json", "train"]);
    assert_eq!(code(&out), 2);
    // Kind mismatch: eval needs the classifier experiment.
    tiny_toy_config(dir.path());
    let out = run_in(dir.path(), &["--config", "toy.json", "eval"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn toy_pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    tiny_toy_config(dir.path());
    assert_ok(&run_in(dir.path(), &["--config", "toy.json", "train"]));
    let out_dir = dir.path().join("out");
    assert!(out_dir.join("train_log.csv").is_file());
    assert!(out_dir.join("phi.bank").is_file());

    assert_ok(&run_in(dir.path(), &["--config", "toy.json", "toy-profile"]));
    assert!(out_dir.join("toy_profile.csv").is_file());
    assert!(out_dir.join("toy_summary.csv").is_file());
    assert!(out_dir.join("toy_profile.svg").is_file());

    assert_ok(&run_in(dir.path(), &["--config", "toy.json", "sample", "--n", "8"]));
    assert!(out_dir.join("samples.bank").is_file());

    assert_ok(&run_in(dir.path(), &["--config", "toy.json", "pca"]));
    assert!(out_dir.join("pca_eigenvalues.csv").is_file());
    assert!(out_dir.join("pca_projections.csv").is_file());
    assert!(out_dir.join("pca_scatter.svg").is_file());

    let csv = std::fs::read_to_string(out_dir.join("toy_profile.csv")).unwrap();
    assert!(csv.starts_with("z,x,y,density,nn_dist\n"));
    assert_eq!(csv.trim_end().lines().count(), 41);
}

/// Drop the final (wall-clock) column from a training log.
fn strip_ms(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    tiny_toy_config(dir.path());
    for sub in ["a", "b"] {
        assert_ok(&run_in(dir.path(), &["--config", "toy.json", "--out", sub, "train"]));
        assert_ok(&run_in(dir.path(), &["--config", "toy.json", "--out", sub, "sample"]));
        assert_ok(&run_in(dir.path(), &["--config", "toy.json", "--out", sub, "toy-profile"]));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    // Everything except the wall-clock column of the train log is
    // byte-identical across reruns.
    let la = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    let lb = std::fs::read_to_string(b.join("train_log.csv")).unwrap();
    assert_eq!(strip_ms(&la), strip_ms(&lb));
    for name in ["phi.bank", "samples.bank"] {
        let ba = std::fs::read(a.join(name)).unwrap();
        let bb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(ba, bb, "{name} differs between reruns");
    }
    for name in ["toy_profile.csv", "toy_summary.csv", "toy_profile.svg"] {
        let ca = std::fs::read_to_string(a.join(name)).unwrap();
        let cb = std::fs::read_to_string(b.join(name)).unwrap();
        assert_eq!(ca, cb, "{name} differs between reruns");
    }
}

#[test]
fn seed_override_changes_samples() {
    let dir = tempfile::tempdir().unwrap();
    tiny_toy_config(dir.path());
    assert_ok(&run_in(dir.path(), &["--config", "toy.json", "train"]));
    assert_ok(&run_in(
        dir.path(),
        &["--config", "toy.json", "--bank", "s7.bank", "sample"],
    ));
    assert_ok(&run_in(
        dir.path(),
        &["--config", "toy.json", "--bank", "s8.bank", "--seed", "8", "sample"],
    ));
    let a = std::fs::read(dir.path().join("s7.bank")).unwrap();
    let b = std::fs::read(dir.path().join("s8.bank")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn classifier_pipeline_and_single_sample_identity() {
    let dir = tempfile::tempdir().unwrap();
    tiny_mnist_config(dir.path());
    assert_ok(&run_in(dir.path(), &["--config", "mnist.json", "train"]));
    assert_ok(&run_in(dir.path(), &["--config", "mnist.json", "sample", "--n", "1"]));
    assert_ok(&run_in(dir.path(), &["--config", "mnist.json", "eval"]));
    let out_dir = dir.path().join("out");
    for name in ["member_accuracies.csv", "histogram.csv", "ensemble.csv"] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }

    // For a bank of one, both ensemble rules and the member accuracy all
    // equal the accuracy of that θ evaluated directly.
    let bank = weightgen::bank::load_bank(&out_dir.join("samples.bank")).unwrap();
    assert_eq!(bank.len(), 1);
    let arch = weightgen::target::ArchDescriptor::mnist();
    let (_, test_ds) =
        weightgen::data::load_or_synthesize(&dir.path().join("data"), 120, 60, 3).unwrap();
    let direct =
        weightgen::target::dataset_accuracy(bank.member(0).1, &arch, &test_ds, 64).unwrap();

    let members = std::fs::read_to_string(out_dir.join("member_accuracies.csv")).unwrap();
    let row = members.lines().nth(1).expect("one member row");
    let acc: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, direct);
    let ensemble = std::fs::read_to_string(out_dir.join("ensemble.csv")).unwrap();
    for line in ensemble.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, direct);
    }

    // Filter grids render from the same bank.
    assert_ok(&run_in(dir.path(), &["--config", "mnist.json", "filters", "--count", "1"]));
    let pgm = std::fs::read(out_dir.join("filters.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn corrupted_bank_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    tiny_toy_config(dir.path());
    assert_ok(&run_in(dir.path(), &["--config", "toy.json", "train"]));
    assert_ok(&run_in(dir.path(), &["--config", "toy.json", "sample"]));
    let bank_path = dir.path().join("out").join("samples.bank");
    let mut bytes = std::fs::read(&bank_path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&bank_path, &bytes).unwrap();
    let out = run_in(dir.path(), &["--config", "toy.json", "pca"]);
    assert_eq!(code(&out), 3);

    // Missing φ checkpoint is a runtime failure, not a config failure.
    let out = run_in(
        dir.path(),
        &["--config", "toy.json", "--out", "elsewhere", "toy-profile"],
    );
    assert_eq!(code(&out), 3);
}
