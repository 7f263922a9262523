//! Base pretraining, preference post-training and evaluation.
//!
//! Training loops run on the calling thread; per-pair loss terms and
//! evaluation fan out through [`crate::par`] and merge in index order, so a
//! seed and a config fully determine every parameter bit.

mod optim;
mod report;

use std::time::Instant;

pub use optim::{AdamW, AdamWConfig};
pub use report::{TrainRecord, TrainReport, REPORT_HEADER};

use crate::data::Dataset;
use crate::denoiser::{Condition, Differentiable, NoisePredictor};
use crate::diffusion::{base_loss, sample_final};
use crate::dpo::{batch_loss, implicit_reward_margin, softplus, DpoConfig};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, digest_f64, RngState};
use crate::par;
use crate::preference::{PreferencePair, RewardSuite};
use crate::schedule::NoiseSchedule;

// Substream tags under the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_SPLIT: u64 = 4;

pub const DEFAULT_EVAL_INTERVAL: usize = 50;
pub const DEFAULT_HELDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!(
                "unknown lr schedule {other:?} (expected constant or cosine)"
            ))),
        }
    }
}

impl LrSchedule {
    fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub log_interval: usize,
    /// Final-epoch loss must fall below this, when set.
    pub gate: Option<f64>,
    pub record_wallclock: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            lr_schedule: LrSchedule::Cosine,
            log_interval: 100,
            gate: Some(0.15),
            record_wallclock: false,
        }
    }
}

fn elapsed_ms(start: &Instant, enabled: bool) -> u64 {
    if enabled {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Trains `model` on the noise-matching loss, in place.
///
/// The record at step 0 is the loss of the first batch before any update;
/// later records average the batches since the previous record. The last
/// record always closes the run.
pub fn pretrain_base<M: Differentiable + ?Sized>(
    model: &mut M,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    rng: &mut RngState,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.log_interval == 0 {
        return Err(Error::invalid("batch size and log interval must be positive"));
    }
    let d = Dataset::DIM;
    if model.data_dim() != d {
        return Err(Error::invalid("model dimension differs from the dataset"));
    }
    let mut opt = AdamW::new(cfg.optimizer, model.num_params())?;
    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let start = Instant::now();
    let mut report = TrainReport::new();
    let mut order: Vec<usize> = (0..n).collect();
    let (mut window, mut window_n) = (0.0, 0usize);
    let mut epoch_loss = f64::NAN;
    let mut step = 0;
    let mut x0 = Vec::with_capacity(cfg.batch_size * d);
    let mut conds = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            x0.clear();
            conds.clear();
            for &i in chunk {
                x0.extend_from_slice(dataset.point(i));
                conds.push(dataset.conds[i]);
            }
            let out = base_loss(model, schedule, &x0, &conds, rng).map_err(|e| diverged(step, e))?;
            if !out.loss.is_finite() {
                return Err(diverged(step, Error::domain(format!("loss is {}", out.loss))));
            }
            if step == 0 {
                report.push(TrainRecord {
                    step: 0,
                    loss: out.loss,
                    margin_mean: None,
                    pair_accuracy: None,
                    wallclock_ms: 0,
                    reward: None,
                })?;
            }
            let lr = cfg.lr_schedule.rate(cfg.optimizer.lr, step, total);
            opt.apply_with_lr(model.params_mut(), &out.grad, lr)
                .map_err(|e| diverged(step, e))?;
            step += 1;
            weighted += out.loss * chunk.len() as f64;
            window += out.loss;
            window_n += 1;
            if step % cfg.log_interval == 0 || step == total {
                report.push(TrainRecord {
                    step,
                    loss: window / window_n as f64,
                    margin_mean: None,
                    pair_accuracy: None,
                    wallclock_ms: elapsed_ms(&start, cfg.record_wallclock),
                    reward: None,
                })?;
                window = 0.0;
                window_n = 0;
            }
        }
        epoch_loss = weighted / n as f64;
    }
    if let Some(gate) = cfg.gate {
        if !(epoch_loss < gate) {
            return Err(Error::Training {
                step,
                last_good: step,
                message: format!("final epoch loss {epoch_loss} is not below the gate {gate}"),
            });
        }
    }
    Ok(report)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NumericDomain(message) => Error::Training {
            step,
            last_good: step.saturating_sub(1),
            message,
        },
        other => other,
    }
}

/// Mean final-epoch noise-matching loss of `model` over `dataset`, with a
/// fresh draw of `t` and noise per point.
pub fn dataset_loss<M: Differentiable + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    seed: u64,
) -> Result<f64> {
    let chunk = 512;
    let chunks = dataset.len().div_ceil(chunk);
    let losses = par::try_map_indexed(chunks, |k| {
        let lo = k * chunk;
        let hi = (lo + chunk).min(dataset.len());
        let mut rng = RngState::substream(seed, &[k as u64]);
        let out = base_loss(
            model,
            schedule,
            &dataset.x[lo * Dataset::DIM..hi * Dataset::DIM],
            &dataset.conds[lo..hi],
            &mut rng,
        )?;
        Ok::<_, Error>(out.loss * (hi - lo) as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / dataset.len() as f64)
}

/// Splits pair indices into (train, held-out). A pair is held out when the
/// seeded hash of its (condition, pool) falls below `fraction`, so pairs from
/// one pool never straddle the split.
pub fn split_heldout(pairs: &[PreferencePair], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("held-out fraction {fraction} outside [0, 1)")));
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        let h = derive_seed(seed, &[STREAM_SPLIT, p.condition.label() as u64, p.pool as u64]);
        let u = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if u < fraction {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, held))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosttrainConfig {
    pub dpo: DpoConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub eval_interval: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
    pub record_wallclock: bool,
}

impl PosttrainConfig {
    pub fn new(dpo: DpoConfig) -> Self {
        Self {
            dpo,
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            eval_interval: DEFAULT_EVAL_INTERVAL,
            heldout_fraction: DEFAULT_HELDOUT_FRACTION,
            seed: 0,
            record_wallclock: false,
        }
    }
}

/// Generates samples per condition at each evaluation and reports their mean
/// aggregate reward.
pub struct RewardProbe<'a> {
    pub suite: &'a RewardSuite,
    pub conditions: Vec<Condition>,
    pub per_condition: usize,
    pub seed: u64,
}

/// Margins of `pairs` under `cfg`; pair `i` draws from `substream(seed, [i])`.
pub fn heldout_margins<M, R>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule,
    pairs: &[&PreferencePair],
    cfg: &DpoConfig,
    seed: u64,
) -> Result<Vec<f64>>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    par::try_map_indexed(pairs.len(), |i| {
        let mut rng = RngState::substream(seed, &[i as u64]);
        implicit_reward_margin(model, reference, schedule, pairs[i], cfg, &mut rng)
    })
}

/// Fraction of margins strictly above zero.
pub fn pair_accuracy(margins: &[f64]) -> f64 {
    if margins.is_empty() {
        return 0.0;
    }
    margins.iter().filter(|&&m| m > 0.0).count() as f64 / margins.len() as f64
}

/// Preference post-training of `model` in place against a frozen copy of its
/// starting parameters.
///
/// Records are written at every multiple of `eval_interval` from 0 to
/// `steps`; their loss, margin and accuracy are measured on the held-out
/// pairs with a fixed evaluation seed.
pub fn posttrain<M: Differentiable + Clone>(
    model: &mut M,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    cfg: &PosttrainConfig,
    probe: Option<&RewardProbe<'_>>,
) -> Result<TrainReport> {
    cfg.dpo.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("pair dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.eval_interval == 0 {
        return Err(Error::invalid("batch size and eval interval must be positive"));
    }
    let (train, held) = split_heldout(pairs, cfg.heldout_fraction, cfg.seed)?;
    if train.is_empty() || held.is_empty() {
        return Err(Error::invalid(format!(
            "held-out split left {} training and {} held-out pairs",
            train.len(),
            held.len()
        )));
    }
    let held: Vec<&PreferencePair> = held.iter().map(|&i| &pairs[i]).collect();
    let reference = model.clone();
    let ref_digest = digest_f64(reference.params());
    let mut opt = AdamW::new(cfg.optimizer, model.num_params())?;
    let mut shuffle_rng = RngState::substream(cfg.seed, &[STREAM_SHUFFLE]);
    let eval_seed = derive_seed(cfg.seed, &[STREAM_EVAL]);
    let start = Instant::now();
    let mut report = TrainReport::new();
    let mut order = train.clone();
    let mut cursor = order.len();
    let mut batch: Vec<&PreferencePair> = Vec::with_capacity(cfg.batch_size);

    for step in 0..=cfg.steps {
        if step % cfg.eval_interval == 0 {
            let margins = heldout_margins(model, &reference, schedule, &held, &cfg.dpo, eval_seed)?;
            let loss = margins.iter().map(|&m| softplus(-m)).sum::<f64>() / margins.len() as f64;
            let reward = match probe {
                Some(p) => Some(mean_reward(model, schedule, p.suite, &p.conditions, p.per_condition, p.seed)?.0),
                None => None,
            };
            report
                .push(TrainRecord {
                    step,
                    loss,
                    margin_mean: Some(margins.iter().sum::<f64>() / margins.len() as f64),
                    pair_accuracy: Some(pair_accuracy(&margins)),
                    wallclock_ms: elapsed_ms(&start, cfg.record_wallclock),
                    reward,
                })
                .map_err(|e| diverged(step, e))?;
        }
        if step == cfg.steps {
            break;
        }
        batch.clear();
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let step_seed = derive_seed(cfg.seed, &[STREAM_STEP, step as u64]);
        let out = batch_loss(model, &reference, schedule, &batch, &cfg.dpo, step_seed)
            .map_err(|e| diverged(step, e))?;
        if !out.loss.is_finite() {
            return Err(diverged(step, Error::domain(format!("loss is {}", out.loss))));
        }
        opt.apply(model.params_mut(), &out.grad).map_err(|e| diverged(step, e))?;
    }
    assert_eq!(
        digest_f64(reference.params()),
        ref_digest,
        "reference parameters changed during post-training"
    );
    Ok(report)
}

/// Deterministic samples for each condition. Condition `c` draws its `x_T`
/// from `substream(seed, [c])`; rows come back grouped by condition.
pub fn generate<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    conditions: &[Condition],
    per_condition: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = model.data_dim();
    par::try_map_indexed(conditions.len(), |k| {
        let c = conditions[k];
        let mut rng = RngState::substream(seed, &[c.label() as u64]);
        let x_t = rng.gaussian_vec(per_condition * d);
        sample_final(model, schedule, &x_t, &vec![c; per_condition])
    })
}

/// Mean aggregate reward and per-component means of generated samples.
pub fn mean_reward<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    suite: &RewardSuite,
    conditions: &[Condition],
    per_condition: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if conditions.is_empty() || per_condition == 0 {
        return Err(Error::invalid("reward evaluation needs samples"));
    }
    let samples = generate(model, schedule, conditions, per_condition, seed)?;
    let d = model.data_dim();
    let mut total = 0.0;
    let mut comps = vec![0.0; suite.len()];
    for (c, xs) in conditions.iter().zip(&samples) {
        for x in xs.chunks_exact(d) {
            let s = suite.aggregate(*c, x)?;
            total += s.aggregate;
            for (acc, v) in comps.iter_mut().zip(&s.components) {
                *acc += v;
            }
        }
    }
    let n = (conditions.len() * per_condition) as f64;
    Ok((total / n, comps.into_iter().map(|v| v / n).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub samples: usize,
    pub mean_reward: f64,
    /// `(name, mean)` for every reward component.
    pub components: Vec<(String, f64)>,
    pub heldout_margin: Option<f64>,
    pub pair_accuracy: Option<f64>,
}

/// Samples `per_condition` points for every condition and scores them; with
/// held-out pairs also reports their mean margin and accuracy.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<M, R>(
    model: &M,
    reference: &R,
    suite: &RewardSuite,
    schedule: &NoiseSchedule,
    conditions: &[Condition],
    per_condition: usize,
    seed: u64,
    heldout: Option<(&[&PreferencePair], &DpoConfig)>,
) -> Result<EvalRecord>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let (mean, comps) = mean_reward(model, schedule, suite, conditions, per_condition, seed)?;
    let (heldout_margin, accuracy) = match heldout {
        Some((pairs, cfg)) if !pairs.is_empty() => {
            let m = heldout_margins(model, reference, schedule, pairs, cfg, derive_seed(seed, &[STREAM_EVAL]))?;
            (Some(m.iter().sum::<f64>() / m.len() as f64), Some(pair_accuracy(&m)))
        }
        _ => (None, None),
    };
    Ok(EvalRecord {
        samples: conditions.len() * per_condition,
        mean_reward: mean,
        components: suite.names().into_iter().map(String::from).zip(comps).collect(),
        heldout_margin,
        pair_accuracy: accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ToyMixture;
    use crate::denoiser::{Architecture, Denoiser};
    use crate::dpo::Variant;
    use crate::preference::{build_pools, pairs_from_pools, PairStrategy};

    fn arch() -> Architecture {
        Architecture {
            data_dim: 2,
            time_dim: 4,
            num_conditions: 8,
            hidden: 16,
        }
    }

    fn small_pretrain() -> PretrainConfig {
        PretrainConfig {
            epochs: 2,
            batch_size: 64,
            log_interval: 4,
            gate: None,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let s = NoiseSchedule::log_linear(20, 0.01).unwrap();
        let data = ToyMixture::default().dataset(64, &mut RngState::new(1)).unwrap();
        let run = || {
            let mut m = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
            let r = pretrain_base(&mut m, &s, &data, &small_pretrain(), &mut RngState::new(3)).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.param_digest(), b.param_digest());
        assert_eq!(ra.to_csv(), rb.to_csv());
        let recs = ra.records();
        assert_eq!(recs[0].step, 0);
        assert_eq!(recs.last().unwrap().step, 16);
        assert!(recs.last().unwrap().loss < recs[0].loss);
    }

    #[test]
    fn gate_failure_is_a_training_error() {
        let s = NoiseSchedule::log_linear(20, 0.01).unwrap();
        let data = ToyMixture::default().dataset(8, &mut RngState::new(1)).unwrap();
        let mut m = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            gate: Some(1e-6),
            ..small_pretrain()
        };
        let err = pretrain_base(&mut m, &s, &data, &cfg, &mut RngState::new(3));
        assert!(matches!(err, Err(Error::Training { .. })));
    }

    #[test]
    fn divergence_reports_the_step() {
        let s = NoiseSchedule::log_linear(20, 0.01).unwrap();
        let data = ToyMixture::default().dataset(8, &mut RngState::new(1)).unwrap();
        let mut m = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
        m.params_mut()[0] = 1e300;
        let err = pretrain_base(&mut m, &s, &data, &small_pretrain(), &mut RngState::new(3));
        assert!(matches!(err, Err(Error::Training { step: 0, .. })), "{err:?}");
    }

    fn pairs_for(m: &Denoiser, s: &NoiseSchedule) -> Vec<PreferencePair> {
        let mix = ToyMixture::default();
        let suite = RewardSuite::toy(mix);
        let pools = build_pools(m, s, &suite, &mix.conditions(), 6, 4, 9).unwrap();
        pairs_from_pools(&pools, PairStrategy::AllOrdered)
    }

    #[test]
    fn posttrain_zero_steps_is_identity() {
        let s = NoiseSchedule::log_linear(10, 0.01).unwrap();
        let m0 = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
        let pairs = pairs_for(&m0, &s);
        let mut m = m0.clone();
        let cfg = PosttrainConfig {
            steps: 0,
            heldout_fraction: 0.3,
            ..PosttrainConfig::new(DpoConfig::new(Variant::InversionDpo))
        };
        let r = posttrain(&mut m, &s, &pairs, &cfg, None).unwrap();
        assert_eq!(m.param_digest(), m0.param_digest());
        assert_eq!(r.records().len(), 1);
        assert!((r.records()[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.records()[0].pair_accuracy, Some(0.0));
    }

    #[test]
    fn posttrain_is_deterministic_and_logs_each_interval() {
        let s = NoiseSchedule::log_linear(10, 0.01).unwrap();
        let m0 = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
        let pairs = pairs_for(&m0, &s);
        for variant in [Variant::DiffusionDpo, Variant::InversionDpo] {
            let cfg = PosttrainConfig {
                steps: 12,
                eval_interval: 4,
                batch_size: 3,
                heldout_fraction: 0.3,
                optimizer: AdamWConfig { lr: 1e-3, weight_decay: 0.01, ..AdamWConfig::default() },
                dpo: DpoConfig { beta: 5.0, ..DpoConfig::new(variant) },
                ..PosttrainConfig::new(DpoConfig::new(variant))
            };
            let run = || {
                let mut m = m0.clone();
                let r = posttrain(&mut m, &s, &pairs, &cfg, None).unwrap();
                (m.param_digest(), r.to_csv())
            };
            let (da, ra) = run();
            let (db, rb) = run();
            assert_eq!(da, db);
            assert_eq!(ra, rb);
            assert_ne!(da, m0.param_digest());
            assert_eq!(ra.lines().count(), 1 + 12 / 4 + 1);
        }
    }

    #[test]
    fn posttrain_rejects_empty_input() {
        let s = NoiseSchedule::log_linear(10, 0.01).unwrap();
        let mut m = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
        let cfg = PosttrainConfig::new(DpoConfig::new(Variant::InversionDpo));
        assert!(posttrain(&mut m, &s, &[], &cfg, None).is_err());
    }

    #[test]
    fn heldout_split_keeps_pools_together() {
        let s = NoiseSchedule::log_linear(10, 0.01).unwrap();
        let m = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
        let pairs = pairs_for(&m, &s);
        let (train, held) = split_heldout(&pairs, 0.3, 5).unwrap();
        assert_eq!(train.len() + held.len(), pairs.len());
        for &h in &held {
            for &t in &train {
                assert!((pairs[h].condition, pairs[h].pool) != (pairs[t].condition, pairs[t].pool));
            }
        }
        assert_eq!(split_heldout(&pairs, 0.3, 5).unwrap(), (train, held));
        assert!(split_heldout(&pairs, 1.0, 5).is_err());
    }

    #[test]
    fn evaluation_is_repeatable_and_names_components() {
        let s = NoiseSchedule::log_linear(10, 0.01).unwrap();
        let m = Denoiser::init(arch(), &mut RngState::new(2)).unwrap();
        let mix = ToyMixture::default();
        let suite = RewardSuite::toy(mix);
        let a = evaluate(&m, &m, &suite, &s, &mix.conditions(), 5, 3, None).unwrap();
        let b = evaluate(&m, &m, &suite, &s, &mix.conditions(), 5, 3, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 40);
        let names: Vec<_> = a.components.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, suite.names());
        let mean_of_components = a.components.iter().map(|(_, v)| v).sum::<f64>() / 2.0;
        assert!((a.mean_reward - mean_of_components).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.rate(1.0, 0, 10), 1.0);
        assert!(LrSchedule::Cosine.rate(1.0, 10, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.5, 7, 10), 0.5);
    }
}
