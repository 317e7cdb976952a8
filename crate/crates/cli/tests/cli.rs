use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualgan::data::{generate_dataset, SyntheticSpec};
use dualgan::training::TrainState;
use dualgan::ModelConfig;
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.n = 4;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.resolution = 8;
    cfg.channel_schedule = "4:16,8:16".parse().unwrap();
    cfg.mapper_layers = 1;
    cfg.extractor_steps = 2;
    cfg.extractor_batch = 4;
    cfg
}

/// An untrained checkpoint on disk.
fn checkpoint(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec {
        resolution: 8,
        ..SyntheticSpec::default()
    };
    let ds = generate_dataset(&spec, 8, 1).unwrap();
    let ck = TrainState::new(&tiny(), &ds).unwrap().to_checkpoint();
    let path = dir.join("ckpt");
    ck.save(&path).unwrap();
    path
}

fn cli(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dualgan"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().unwrap()
}

fn files(dir: &Path, suffix: &str) -> Vec<Vec<u8>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn usage_errors_exit_with_one() {
    let out = cli(&["sample", "--count", "2"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = cli(
        &["sample", "--mode", "sideways"],
        &[("--ckpt", Path::new("x")), ("--out", Path::new("y"))],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(
        &["sample"],
        &[("--ckpt", &tmp.path().join("missing")), ("--out", tmp.path())],
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_slice(out.stderr.split(|b| *b == b'\n').rfind(|l| !l.is_empty()).unwrap()).unwrap();
    assert!(err["error"].is_string() && err["detail"].is_string());
}

#[test]
fn sampling_is_reproducible_and_fix_p_shares_the_initial_map() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = cli(
            &["sample", "--seed", "4", "--count", "5", "--mode", "fix_p", "--dump-f0"],
            &[("--ckpt", &ck), ("--out", out)],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(files(&a, ".png"), files(&b, ".png"));
    let f0 = files(&a, ".bin");
    assert_eq!(f0.len(), 5);
    assert!(f0.iter().all(|x| *x == f0[0]));

    let free = tmp.path().join("free");
    cli(
        &["sample", "--seed", "4", "--count", "5", "--dump-f0"],
        &[("--ckpt", &ck), ("--out", &free)],
    );
    let f0 = files(&free, ".bin");
    assert!(f0.iter().any(|x| *x != f0[0]));
}

#[test]
fn edit_writes_origin_plus_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = checkpoint(tmp.path());
    let dirs = tmp.path().join("dirs.json");
    let o = cli(
        &["fit-directions", "--attrs", "hue,size", "--samples", "800"],
        &[("--ckpt", &ck), ("--out", &dirs)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let strip = tmp.path().join("strip");
    let o = cli(
        &[
            "edit",
            "--attr",
            "hue",
            "--lambda-z",
            "-2",
            "--lambda-p",
            "1",
            "--steps",
            "6",
        ],
        &[("--ckpt", &ck), ("--directions", &dirs), ("--out", &strip)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&strip, ".png").len(), 7);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["scores"].as_array().unwrap().len(), 7);

    let o = cli(
        &["edit", "--attr", "smile"],
        &[("--ckpt", &ck), ("--directions", &dirs), ("--out", &strip)],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_attribute"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn sample_writes_exactly_count_images(count in 1usize..6, seed in 0u64..100) {
        let tmp = tempfile::tempdir().unwrap();
        let ck = checkpoint(tmp.path());
        let out = tmp.path().join("s");
        let o = cli(&["sample", "--count", &count.to_string(), "--seed", &seed.to_string()], &[("--ckpt", &ck), ("--out", &out)]);
        prop_assert!(o.status.success());
        prop_assert_eq!(files(&out, ".png").len(), count);
    }
}
