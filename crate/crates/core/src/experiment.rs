//! End-to-end pipeline steps shared by the command-line tool and the
//! acceptance harness: pretrain, pair generation, post-training,
//! diagnostics and the variant comparison.
//!
//! Every step is a pure function of its config and input files; seeds for
//! the separate phases are substreams of the config seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::denoiser::{load_checkpoint, save_checkpoint, write_checkpoint, Denoiser};
use crate::dpo::{TimestepMode, Variant};
use crate::error::{Error, Result};
use crate::inversion::{adjacent_eps_gaps, invert_batch, roundtrip_errors};
use crate::numerics::{derive_seed, RngState};
use crate::preference::{
    build_pools, load_pairs, pairs_from_pools, pool_scores_csv, save_pairs, CandidatePool,
    PreferencePair, RewardSuite,
};
use crate::schedule::NoiseSchedule;
use crate::trainer::{
    evaluate, posttrain, pretrain_base, split_heldout, EvalRecord, RewardProbe, TrainReport,
};

const STREAM_DATA: u64 = 10;
const STREAM_INIT: u64 = 11;
const STREAM_PRETRAIN: u64 = 12;
const STREAM_PAIRGEN: u64 = 13;
const STREAM_DIAGNOSE: u64 = 14;

pub const CHECKPOINT_FILE: &str = "base.idpo";
pub const PRETRAIN_REPORT: &str = "pretrain.csv";
pub const POSTTRAINED_FILE: &str = "posttrained.idpo";
pub const POSTTRAIN_REPORT: &str = "posttrain.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const DIAGNOSE_FILE: &str = "diagnose.csv";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const COMPARE_SUMMARY_FILE: &str = "compare_summary.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn reward_suite(cfg: &ExperimentConfig) -> RewardSuite {
    RewardSuite::toy(cfg.mixture)
}

/// Trains the base denoiser from scratch.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(Denoiser, NoiseSchedule, TrainReport)> {
    let schedule = cfg.schedule()?;
    let data = cfg
        .mixture
        .dataset(cfg.per_condition, &mut RngState::substream(cfg.seed, &[STREAM_DATA]))?;
    let mut model = Denoiser::init(cfg.arch, &mut RngState::substream(cfg.seed, &[STREAM_INIT]))?;
    let mut rng = RngState::substream(cfg.seed, &[STREAM_PRETRAIN]);
    let report = pretrain_base(&mut model, &schedule, &data, &cfg.pretrain, &mut rng)?;
    Ok((model, schedule, report))
}

/// Writes `base.idpo` and `pretrain.csv` under `out_dir`.
pub fn run_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let (model, schedule, report) = pretrain(cfg)?;
    let path = out_dir.join(CHECKPOINT_FILE);
    write(&path, write_checkpoint(&model, &schedule))?;
    write(&out_dir.join(PRETRAIN_REPORT), report.to_csv())?;
    Ok(path)
}

/// Scored pools for every condition and the pairs formed from them.
pub fn pairgen(
    cfg: &ExperimentConfig,
    model: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<(Vec<CandidatePool>, Vec<PreferencePair>)> {
    let suite = reward_suite(cfg);
    let pools = build_pools(
        model,
        schedule,
        &suite,
        &cfg.mixture.conditions(),
        cfg.pools_per_condition,
        cfg.pool_size,
        derive_seed(cfg.seed, &[STREAM_PAIRGEN]),
    )?;
    let pairs = pairs_from_pools(&pools, cfg.strategy);
    Ok((pools, pairs))
}

/// Path of the score CSV written next to a pair file.
pub fn scores_path(pairs_path: &Path) -> PathBuf {
    let stem = pairs_path.file_stem().and_then(|s| s.to_str()).unwrap_or("pairs");
    pairs_path.with_file_name(format!("{stem}_scores.csv"))
}

/// Writes the pair file to `out` and the pool scores beside it. Returns the
/// pair count.
pub fn run_pairgen(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<usize> {
    let (model, schedule) = load_checkpoint(checkpoint)?;
    let (pools, pairs) = pairgen(cfg, &model, &schedule)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    save_pairs(&pairs, out)?;
    let suite = reward_suite(cfg);
    write(&scores_path(out), pool_scores_csv(&pools, &suite.names()))?;
    Ok(pairs.len())
}

/// Held-out pairs under the config's split.
pub fn heldout_pairs<'a>(cfg: &ExperimentConfig, pairs: &'a [PreferencePair]) -> Result<Vec<&'a PreferencePair>> {
    let (_, held) = split_heldout(pairs, cfg.posttrain.heldout_fraction, cfg.posttrain.seed)?;
    Ok(held.iter().map(|&i| &pairs[i]).collect())
}

pub struct PosttrainOutcome {
    pub model: Denoiser,
    pub report: TrainReport,
    pub base_eval: EvalRecord,
    pub final_eval: EvalRecord,
}

/// Post-trains a copy of `base` and evaluates both models on the same
/// samples and held-out pairs.
pub fn posttrain_model(
    cfg: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    probe: bool,
) -> Result<PosttrainOutcome> {
    let suite = reward_suite(cfg);
    let conditions = cfg.mixture.conditions();
    let probe = probe.then(|| RewardProbe {
        suite: &suite,
        conditions: conditions.clone(),
        per_condition: cfg.eval_per_condition,
        seed: cfg.eval_seed,
    });
    let mut model = base.clone();
    let report = posttrain(&mut model, schedule, pairs, &cfg.posttrain, probe.as_ref())?;
    let held = heldout_pairs(cfg, pairs)?;
    let eval = |m: &Denoiser| {
        evaluate(
            m,
            base,
            &suite,
            schedule,
            &conditions,
            cfg.eval_per_condition,
            cfg.eval_seed,
            Some((&held, &cfg.posttrain.dpo)),
        )
    };
    Ok(PosttrainOutcome {
        base_eval: eval(base)?,
        final_eval: eval(&model)?,
        model,
        report,
    })
}

/// `model,metric,value` rows for the base and post-trained evaluations.
pub fn eval_csv(base: &EvalRecord, post: &EvalRecord) -> String {
    let mut out = String::from("model,metric,value\n");
    for (name, rec) in [("base", base), ("posttrained", post)] {
        let _ = writeln!(out, "{name},mean_reward,{}", rec.mean_reward);
        for (comp, v) in &rec.components {
            let _ = writeln!(out, "{name},{comp},{v}");
        }
        if let Some(m) = rec.heldout_margin {
            let _ = writeln!(out, "{name},heldout_margin,{m}");
        }
        if let Some(a) = rec.pair_accuracy {
            let _ = writeln!(out, "{name},pair_accuracy,{a}");
        }
        let _ = writeln!(out, "{name},samples,{}", rec.samples);
    }
    out
}

/// Writes `posttrained.idpo`, `posttrain.csv` and `eval.csv` under `out_dir`.
/// The output checkpoint keeps the input's schedule.
pub fn run_posttrain(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    pairs_path: &Path,
    out_dir: &Path,
) -> Result<PosttrainOutcome> {
    let (base, schedule) = load_checkpoint(checkpoint)?;
    let pairs = load_pairs(pairs_path)?;
    let train_schedule = cfg.schedule()?;
    let outcome = posttrain_model(cfg, &base, &train_schedule, &pairs, false)?;
    fs::create_dir_all(out_dir)?;
    save_checkpoint(&outcome.model, &schedule, &out_dir.join(POSTTRAINED_FILE))?;
    write(&out_dir.join(POSTTRAIN_REPORT), outcome.report.to_csv())?;
    write(&out_dir.join(EVAL_FILE), eval_csv(&outcome.base_eval, &outcome.final_eval))?;
    Ok(outcome)
}

/// Batch-mean diagnostics at one inversion step count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnoseRow {
    pub steps: usize,
    pub roundtrip_error: f64,
    pub adjacent_eps_gap: f64,
}

/// Clean points shared by every step count: `diagnose_samples` points drawn
/// round-robin over conditions.
fn diagnose_points(cfg: &ExperimentConfig) -> (Vec<f64>, Vec<crate::denoiser::Condition>) {
    let conds_all = cfg.mixture.conditions();
    let mut rng = RngState::substream(cfg.seed, &[STREAM_DIAGNOSE]);
    let n = cfg.diagnose_samples;
    let mut x = vec![0.0; 2 * n];
    let mut conds = Vec::with_capacity(n);
    for i in 0..n {
        let c = conds_all[i % conds_all.len()];
        cfg.mixture.sample_into(&mut rng, c, &mut x[2 * i..2 * i + 2]);
        conds.push(c);
    }
    (x, conds)
}

/// Round-trip error and adjacent noise gap for every configured step count,
/// plus the inverted trajectories of the first few points as CSV.
pub fn diagnose(cfg: &ExperimentConfig, model: &Denoiser) -> Result<(Vec<DiagnoseRow>, String)> {
    let (x, conds) = diagnose_points(cfg);
    let mut rows = Vec::new();
    let mut dump = String::from("T,sample,t,x0,x1\n");
    let dumps = cfg.diagnose_dumps.min(conds.len());
    for &steps in &cfg.diagnose_steps {
        let s = NoiseSchedule::log_linear(steps, cfg.alpha_final)?;
        let rt = roundtrip_errors(model, &s, &x, &conds)?;
        let traj = invert_batch(model, &s, &x, &conds)?;
        let gaps = adjacent_eps_gaps(model, &s, &traj)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(DiagnoseRow {
            steps,
            roundtrip_error: mean(&rt),
            adjacent_eps_gap: mean(&gaps),
        });
        for row in 0..dumps {
            for t in 0..=steps {
                let p = traj.state(t, row);
                let _ = writeln!(dump, "{steps},{row},{t},{},{}", p[0], p[1]);
            }
        }
    }
    Ok((rows, dump))
}

pub fn diagnose_csv(rows: &[DiagnoseRow]) -> String {
    let mut out = String::from("T,metric,value\n");
    for r in rows {
        let _ = writeln!(out, "{},roundtrip_error,{}", r.steps, r.roundtrip_error);
        let _ = writeln!(out, "{},adjacent_eps_gap,{}", r.steps, r.adjacent_eps_gap);
    }
    out
}

/// Writes `diagnose.csv` and `trajectories.csv` under `out_dir`.
pub fn run_diagnose(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<Vec<DiagnoseRow>> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let (rows, dump) = diagnose(cfg, &model)?;
    write(&out_dir.join(DIAGNOSE_FILE), diagnose_csv(&rows))?;
    write(&out_dir.join(TRAJECTORY_FILE), dump)?;
    Ok(rows)
}

/// One posttraining run in the comparison.
#[derive(Debug, Clone)]
pub struct CompareRun {
    pub label: &'static str,
    pub report: TrainReport,
    /// First logged step whose probed reward reaches the threshold.
    pub steps_to_threshold: Option<usize>,
    pub final_accuracy: f64,
    pub final_reward: f64,
}

pub const COMPARE_LABELS: [&str; 3] = ["diffusion-dpo", "inversion-dpo", "inversion-dpo-single-t"];

/// Matched-budget posttraining of both variants and the single-step
/// inversion ablation, each probed for reward at every evaluation.
pub fn compare(
    cfg: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
) -> Result<Vec<CompareRun>> {
    let suite = reward_suite(cfg);
    let probe = RewardProbe {
        suite: &suite,
        conditions: cfg.mixture.conditions(),
        per_condition: cfg.eval_per_condition,
        seed: cfg.eval_seed,
    };
    let mut runs = Vec::new();
    for label in COMPARE_LABELS {
        let mut c = match label {
            "diffusion-dpo" => cfg.with_variant(Variant::DiffusionDpo),
            _ => cfg.with_variant(Variant::InversionDpo),
        };
        if label == "inversion-dpo-single-t" {
            c.posttrain.dpo.timestep_mode = TimestepMode::SingleUniformT;
        }
        let mut model = base.clone();
        let report = posttrain(&mut model, schedule, pairs, &c.posttrain, Some(&probe))?;
        let last = report
            .last()
            .ok_or_else(|| Error::State("posttraining produced no records".into()))?;
        let steps_to_threshold = report
            .records()
            .iter()
            .find(|r| r.reward.is_some_and(|v| v >= cfg.reward_threshold))
            .map(|r| r.step);
        runs.push(CompareRun {
            label,
            final_accuracy: last.pair_accuracy.unwrap_or(0.0),
            final_reward: last.reward.unwrap_or(f64::NAN),
            steps_to_threshold,
            report,
        });
    }
    Ok(runs)
}

/// Long format: `variant,step,metric,value`.
pub fn compare_csv(runs: &[CompareRun]) -> String {
    let mut out = String::from("variant,step,metric,value\n");
    for run in runs {
        for r in run.report.records() {
            let metrics = [
                ("loss", Some(r.loss)),
                ("margin_mean", r.margin_mean),
                ("pair_accuracy", r.pair_accuracy),
                ("reward", r.reward),
            ];
            for (name, v) in metrics {
                if let Some(v) = v {
                    let _ = writeln!(out, "{},{},{name},{v}", run.label, r.step);
                }
            }
        }
    }
    out
}

pub fn compare_summary_csv(runs: &[CompareRun], threshold: f64) -> String {
    let mut out = String::from("variant,reward_threshold,steps_to_threshold,final_pair_accuracy,final_reward\n");
    for run in runs {
        let steps = run
            .steps_to_threshold
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into());
        let _ = writeln!(
            out,
            "{},{threshold},{steps},{},{}",
            run.label, run.final_accuracy, run.final_reward
        );
    }
    out
}

/// Writes `compare.csv` and `compare_summary.csv` under `out_dir`.
pub fn run_compare(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    pairs_path: &Path,
    out_dir: &Path,
) -> Result<Vec<CompareRun>> {
    let (base, _) = load_checkpoint(checkpoint)?;
    let pairs = load_pairs(pairs_path)?;
    let runs = compare(cfg, &base, &cfg.schedule()?, &pairs)?;
    write(&out_dir.join(COMPARE_FILE), compare_csv(&runs))?;
    write(&out_dir.join(COMPARE_SUMMARY_FILE), compare_summary_csv(&runs, cfg.reward_threshold))?;
    Ok(runs)
}
