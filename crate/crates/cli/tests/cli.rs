use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idpo::numerics::{digest_f64, hex};

fn idpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idpo")).args(args).output().unwrap()
}

fn toy_conf() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.conf")
        .display()
        .to_string()
}

const SMALL: &[&str] = &[
    "--set", "pretrain.epochs=2",
    "--set", "pretrain.gate=none",
    "--set", "data.per_condition=32",
    "--set", "pairgen.pools_per_condition=4",
    "--set", "posttrain.steps=6",
    "--set", "posttrain.eval_interval=3",
    "--set", "posttrain.heldout_fraction=0.5",
    "--set", "eval.per_condition=4",
    "--set", "schedule.T=10",
];

fn run_small(extra: &[&str]) -> Output {
    let conf = toy_conf();
    let mut args = vec!["--config", conf.as_str()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    idpo(&args)
}

fn pretrained(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("pre{seed}"));
    let o = run_small(&["--seed", seed, "pretrain", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("base.idpo")
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = idpo(&["--config", "/nonexistent/idpo.conf", "pretrain", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pool_size_one_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = idpo(&[
        "--set", "pairgen.pool_size=1",
        "pairgen", "--checkpoint", "x.idpo", "--out", dir.path().join("p.idpr").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pairgen.pool_size"));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let o = idpo(&[
        "posttrain", "--checkpoint", "a", "--pairs", "b", "--variant", "ppo", "--out", "c",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let o = idpo(&["--set", "posttrain.betta=3", "pretrain", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = idpo(&["diagnose", "--checkpoint", "/nonexistent.idpo", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn seed_changes_the_pretrained_weights() {
    let dir = tempfile::tempdir().unwrap();
    let a = fs::read(pretrained(dir.path(), "1")).unwrap();
    let b = fs::read(pretrained(dir.path(), "2")).unwrap();
    let a2 = fs::read(pretrained(dir.path(), "1")).unwrap();
    assert_eq!(a, a2);
    assert_ne!(a, b);
}

#[test]
fn posttrain_writes_one_row_per_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let base = pretrained(dir.path(), "0");
    let pairs = dir.path().join("pairs.idpr");
    let o = run_small(&["pairgen", "--checkpoint", base.to_str().unwrap(), "--out", pairs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("pairs_scores.csv").exists());

    for variant in ["inversion-dpo", "diffusion-dpo"] {
        let out = dir.path().join(variant);
        let o = run_small(&[
            "posttrain",
            "--checkpoint", base.to_str().unwrap(),
            "--pairs", pairs.to_str().unwrap(),
            "--variant", variant,
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(out.join("posttrain.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,margin_mean,pair_accuracy,wallclock_ms");
        // Steps 0, 3 and 6.
        assert_eq!(lines.len(), 1 + 3);
        let step0: Vec<&str> = lines[1].split(',').collect();
        let loss0: f64 = step0[1].parse().unwrap();
        assert!((loss0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(out.join("posttrained.idpo").exists());
        assert!(out.join("eval.csv").exists());
    }
}

#[test]
fn zero_model_diagnose_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let arch = idpo::denoiser::Architecture::default();
    let zero = idpo::denoiser::Denoiser::zeros(arch).unwrap();
    let schedule = idpo::schedule::NoiseSchedule::log_linear(80, 0.01).unwrap();
    let ckpt = dir.path().join("zero.idpo");
    idpo::denoiser::save_checkpoint(&zero, &schedule, &ckpt).unwrap();
    let out = dir.path().join("diag");
    let o = idpo(&[
        "--set", "diagnose.samples=32",
        "diagnose", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("diagnose.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("T,metric,value"));
    for line in csv.lines().skip(1) {
        let value: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(value.abs() < 1e-12, "{line}");
    }
    assert!(out.join("trajectories.csv").exists());
    // The checkpoint itself is untouched by diagnosis.
    let (reloaded, _) = idpo::denoiser::load_checkpoint(&ckpt).unwrap();
    use idpo::denoiser::Differentiable;
    assert_eq!(hex(&digest_f64(reloaded.params())), hex(&digest_f64(zero.params())));
}
