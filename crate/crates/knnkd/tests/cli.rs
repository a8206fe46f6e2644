//! End-to-end checks of the `knnkd` binary: stage chaining, documented exit
//! codes, and the output-directory environment variable.

use std::path::Path;
use std::process::Command;

fn knnkd(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_knnkd"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn pipeline_chains_through_the_binary_with_exit_code_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let runs: Vec<Vec<&str>> = vec![
        vec![
            "gen-synth",
            "--num-sources",
            "8",
            "--valid-targets",
            "6",
            "--target-len",
            "8",
            "--seed",
            "3",
        ],
        vec!["train", "--mode", "ce", "--epochs", "30", "--hidden-dim", "16", "--embed-dim", "16"],
        vec!["build-datastore"],
        vec!["knn-search", "--k", "8"],
        vec![
            "train",
            "--mode",
            "knn-kd",
            "--epochs",
            "30",
            "--hidden-dim",
            "16",
            "--embed-dim",
            "16",
            "--neighbors",
        ],
        vec!["decode", "--mode", "base", "--beam", "2"],
        vec!["evaluate"],
        vec![
            "sweep",
            "--ks",
            "1,2",
            "--taus",
            "1",
            "--epochs",
            "5",
            "--hidden-dim",
            "16",
            "--embed-dim",
            "16",
            "--beam",
            "1",
        ],
    ];
    for mut args in runs {
        if args.last() == Some(&"--neighbors") {
            args.push(Box::leak(
                out.join("train.knn").display().to_string().into_boxed_str(),
            ));
        }
        let r = knnkd(&args, out);
        assert!(
            r.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&r.stderr)
        );
    }
    for artifact in [
        "data/train.src",
        "data/oracle.tsv",
        "ce.ckpt",
        "train.ds",
        "train.knn",
        "knnkd.ckpt",
        "hyps-base-test.tgt",
        "eval.report.txt",
        "eval.report.json",
        "sweep.tsv",
        "data/gen-synth.manifest.json",
        "build-datastore.manifest.json",
    ] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
    let sweep = std::fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "header plus one row per grid point");
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let r = knnkd(
        &["gen-synth", "--num-sources", "4", "--valid-targets", "1"],
        out,
    );
    assert_eq!(r.status.code(), Some(2), "precondition violation");

    knnkd(
        &["gen-synth", "--num-sources", "4", "--valid-targets", "4"],
        out,
    );
    // knn-kd without a neighbor file is an invalid flag combination.
    let r = knnkd(&["train", "--mode", "knn-kd", "--epochs", "1"], out);
    assert_eq!(r.status.code(), Some(2));

    // Unknown flags are clap usage errors, also exit code 2.
    let r = knnkd(&["train", "--no-such-flag"], out);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    knnkd(
        &["gen-synth", "--num-sources", "4", "--valid-targets", "4"],
        out,
    );
    // No checkpoint yet.
    let r = knnkd(&["build-datastore"], out);
    assert_eq!(r.status.code(), Some(3));

    // Fingerprint mismatch: datastore built from one checkpoint, searched
    // with another.
    for args in [
        vec!["train", "--mode", "ce", "--epochs", "2", "--hidden-dim", "8", "--embed-dim", "8"],
        vec!["build-datastore"],
        vec![
            "train", "--mode", "ce", "--epochs", "3", "--hidden-dim", "8", "--embed-dim", "8",
            "--ckpt-name", "other.ckpt",
        ],
    ] {
        let r = knnkd(&args, out);
        assert!(r.status.success());
    }
    let other = out.join("other.ckpt");
    let r = knnkd(
        &["knn-search", "--checkpoint", other.to_str().unwrap(), "--k", "2"],
        out,
    );
    assert_eq!(r.status.code(), Some(3), "fingerprint mismatch must be exit 3");
}

#[test]
fn out_dir_env_variable_selects_default_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let r = Command::new(env!("CARGO_BIN_EXE_knnkd"))
        .env("KNNKD_OUT", &out)
        .args(["gen-synth", "--num-sources", "4", "--valid-targets", "4"])
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(out.join("data/train.src").exists());
}
