mod common;

use std::path::Path;

const SMALL: &str = "\
[cohort]
patients = 12
[discovery]
instances = 4
[pretrain]
max_epochs = 3
[finetune]
max_epochs = 3
probe_epochs = 10
[evaluation]
seeds = [0, 1]
fractions = [0.5, 1.0]
words = [3, 4]
";

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn reruns_are_byte_identical_modulo_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    for (cmd, code) in common::run_pipeline(&cfg, &out) {
        assert_eq!(code, 0, "{cmd}");
    }
    let first = common::snapshot(&out);
    assert!(first.len() > 50);
    for (cmd, code) in common::run_pipeline(&cfg, &out) {
        assert_eq!(code, 0, "{cmd}");
    }
    let second = common::snapshot(&out);
    assert_eq!(common::snapshot_diff(&first, &second), Vec::<String>::new());
}

#[test]
fn artifacts_embed_digest_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert_eq!(common::run(&cfg, &out, &["gen-phantoms", "--seed", "7"]), 0);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("phantoms/MANIFEST.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    let digest = m["config_digest"].as_str().unwrap().to_string();
    assert_eq!(digest.len(), 64);
    let toml = std::fs::read_to_string(out.join("phantoms/config.toml")).unwrap();
    assert!(toml.contains("seed = 7"));
    let cohort: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("phantoms/manifest.json")).unwrap()).unwrap();
    assert_eq!(cohort["provenance"]["config_digest"], digest.as_str());
    assert_eq!(common::run(&cfg, &out, &["gen-phantoms", "--seed", "8"]), 0);
    let m2: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("phantoms/MANIFEST.json")).unwrap()).unwrap();
    assert_ne!(m2["config_digest"].as_str().unwrap(), digest);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(dir.path(), "[pretrain]\nunknown_key = 1\n");
    assert_eq!(common::run(&bad, &out, &["gen-phantoms"]), 2);
    let good = dir.path().join("good.toml");
    std::fs::write(&good, SMALL).unwrap();
    assert_eq!(
        common::run(&good, &out, &["gen-phantoms", "--set", "pretrain.lambda_cls=-1"]),
        2
    );
    assert_eq!(
        common::run(&good, &out, &["gen-phantoms", "--set", "no_equals_sign"]),
        2
    );
    assert_eq!(
        common::run(&dir.path().join("missing.toml"), &out, &["gen-phantoms"]),
        2
    );
    assert_eq!(common::bin().arg("no-such-command").status().unwrap().code(), Some(2));
    assert!(!out.join("phantoms").exists());
}

#[test]
fn diverging_pretraining_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert_eq!(common::run(&cfg, &out, &["discover"]), 0);
    let code = common::run(
        &cfg,
        &out,
        &[
            "pretrain",
            "--set",
            "pretrain.learning_rate=1e30",
            "--set",
            "pretrain.max_epochs=5",
        ],
    );
    assert_eq!(code, 3);
    let report = std::fs::read_to_string(out.join("pretrain/transvw/report.json")).unwrap();
    assert!(report.contains("aborted"));
}

#[test]
fn tampering_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert_eq!(common::run(&cfg, &out, &["discover"]), 0);
    let verify = |p: &Path| {
        common::bin()
            .arg("verify")
            .arg(p)
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap()
            .code()
    };
    assert_eq!(verify(&out), Some(0));
    let patch = out.join("discovery/dataset/word0_inst0.bin");
    let mut b = std::fs::read(&patch).unwrap();
    b[20] ^= 0xff;
    std::fs::write(&patch, &b).unwrap();
    assert_eq!(verify(&out), Some(4));
    b[20] ^= 0xff;
    std::fs::write(&patch, &b).unwrap();
    assert_eq!(verify(&out), Some(0));
    let manifest = out.join("discovery/MANIFEST.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(
        &manifest,
        text.replacen("\"config_digest\": \"", "\"config_digest\": \"0", 1),
    )
    .unwrap();
    assert_eq!(verify(&out), Some(4));
    let code = common::run(
        &cfg,
        &out,
        &["pretrain", "--dataset", out.join("nowhere").to_str().unwrap()],
    );
    assert_ne!(code, 0);
}
