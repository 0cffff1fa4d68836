//! End-to-end checks of the `remi` binary: pipeline smoke, manifest
//! round-trip, exit codes.

use std::path::Path;
use std::process::Command;

fn remi(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_remi"))
        .args(args)
        .current_dir(dir)
        .env_remove("REMI_SEED")
        .output()
        .expect("failed to run remi")
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let small = [
        "--set", "n_topics=4", "--set", "items_per_topic=40", "--set", "n_users=200",
        "--set", "seq_min=10", "--set", "seq_max=20",
    ];

    let mut synth = vec!["synth", "--corpus-dir", "corpus", "--seed", "9"];
    synth.extend_from_slice(&small);
    let out = remi(&synth, dir);
    assert!(out.status.success(), "synth failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("corpus/sequences.tsv").exists());

    let out = remi(
        &[
            "train", "--corpus-dir", "corpus", "--report-dir", "report",
            "--checkpoint", "report/model.ckpt", "--seed", "9",
            "--set", "d=8", "--set", "d_a=16", "--set", "k=2", "--set", "n=10",
            "--set", "batch_size=16", "--set", "neg_multiplier=4",
            "--max-iters", "200", "--set", "eval_every=100",
            "--beta", "1", "--lambda", "100",
        ],
        dir,
    );
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("report/model.ckpt").exists());
    assert!(dir.join("report/model.ckpt.final").exists());
    assert!(dir.join("report/history.csv").exists());

    let out = remi(
        &["eval", "--corpus-dir", "corpus", "--report-dir", "report",
          "--checkpoint", "report/model.ckpt", "--seed", "9"],
        dir,
    );
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.join("report/metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("recall,20,")));
    assert!(metrics.lines().any(|l| l.starts_with("ndcg,50,")));

    let out = remi(
        &["diagnose", "--corpus-dir", "corpus", "--report-dir", "report",
          "--checkpoint", "report/model.ckpt", "--seed", "9", "--set", "dump_routing=2"],
        dir,
    );
    assert!(out.status.success(), "diagnose failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("report/collapse.csv").exists());
    assert!(dir.join("report/routing").read_dir().unwrap().count() >= 1);

    // the manifest is itself a valid config file
    let manifest = dir.join("report/manifest.txt");
    assert!(manifest.exists());
    let out = remi(
        &["eval", "--config", "report/manifest.txt", "--corpus-dir", "corpus",
          "--report-dir", "report2", "--checkpoint", "report/model.ckpt"],
        dir,
    );
    assert!(out.status.success(), "manifest reuse failed: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(dir.join("report/metrics.csv")).unwrap(),
        std::fs::read(dir.join("report2/metrics.csv")).unwrap(),
    );
}

#[test]
fn config_error_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = remi(&["train", "--corpus-dir", "corpus", "--beta", "-1"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let out = remi(&["train", "--corpus-dir", "corpus", "--set", "bogus_key=1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_error_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    // missing corpus directory is a data error
    let out = remi(&["train", "--corpus-dir", "nope"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn env_seed_applies_only_without_explicit_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = [
        "synth", "--corpus-dir", "c1", "--set", "n_topics=2", "--set", "topics_max=2",
        "--set", "items_per_topic=20", "--set", "n_users=50", "--set", "seq_min=5",
        "--set", "seq_max=8",
    ];
    let run = |corpus: &str, env_seed: Option<&str>, flag_seed: Option<&str>| {
        let mut a: Vec<&str> = args.to_vec();
        a[2] = corpus;
        if let Some(s) = flag_seed {
            a.push("--seed");
            a.push(s);
        }
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_remi"));
        cmd.args(&a).current_dir(dir).env_remove("REMI_SEED");
        if let Some(s) = env_seed {
            cmd.env("REMI_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(dir.join(corpus).join("sequences.tsv")).unwrap()
    };
    let env_only = run("c1", Some("7"), None);
    let flag_only = run("c2", None, Some("7"));
    let flag_wins = run("c3", Some("123"), Some("7"));
    let default = run("c4", None, None); // seed 42 default
    assert_eq!(env_only, flag_only, "REMI_SEED should act like --seed when unset");
    assert_eq!(flag_only, flag_wins, "--seed should override REMI_SEED");
    assert_ne!(default, env_only);
}
