//! Preference losses: the Diffusion-DPO baseline and Inversion-DPO.
//!
//! Both are `softplus(-m)` of a margin `m`:
//!
//! ```text
//! diffusion-dpo   m = -beta (D_w - D_l),  D = ||e - e_theta||^2 - ||e - e_ref||^2
//! inversion-dpo   m = sign * beta * sum_t (||e_theta - e_ref||^2(x_t^w) - ||e_theta - e_ref||^2(x_t^l))
//! ```
//!
//! The diffusion baseline noises each pair member at one shared random `t`
//! with fresh noise, with the weighting and the `T` factor folded into `beta`.
//! Inversion-DPO walks both members to `x_T` by DDIM inversion under the
//! current model and holds those states fixed while differentiating.

use std::fmt;
use std::str::FromStr;

use crate::denoiser::{Condition, Differentiable, EpsQuery, NoisePredictor, Tape};
use crate::error::{Error, Result};
use crate::inversion::invert_batch_upto;
use crate::numerics::{ensure_finite, RngState};
use crate::par;
use crate::preference::PreferencePair;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_BETA: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    DiffusionDpo,
    InversionDpo,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion-dpo" => Ok(Self::DiffusionDpo),
            "inversion-dpo" => Ok(Self::InversionDpo),
            other => Err(Error::invalid(format!(
                "unknown variant {other:?} (expected diffusion-dpo or inversion-dpo)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DiffusionDpo => "diffusion-dpo",
            Self::InversionDpo => "inversion-dpo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepMode {
    /// Sum over every step of the trajectory.
    FullTrajectory,
    /// One uniformly drawn step per pair, scaled by `T`.
    SingleUniformT,
}

impl FromStr for TimestepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-trajectory" => Ok(Self::FullTrajectory),
            "single-uniform-t" => Ok(Self::SingleUniformT),
            other => Err(Error::invalid(format!(
                "unknown timestep mode {other:?} (expected full-trajectory or single-uniform-t)"
            ))),
        }
    }
}

impl fmt::Display for TimestepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullTrajectory => "full-trajectory",
            Self::SingleUniformT => "single-uniform-t",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub variant: Variant,
    /// Sign applied to the inversion-dpo sum, `+1` or `-1`.
    pub inner_sign: f64,
    pub timestep_mode: TimestepMode,
}

impl DpoConfig {
    pub fn new(variant: Variant) -> Self {
        let timestep_mode = match variant {
            Variant::DiffusionDpo => TimestepMode::SingleUniformT,
            Variant::InversionDpo => TimestepMode::FullTrajectory,
        };
        Self {
            beta: DEFAULT_BETA,
            variant,
            inner_sign: 1.0,
            timestep_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.inner_sign != 1.0 && self.inner_sign != -1.0 {
            return Err(Error::invalid(format!(
                "inner_sign must be +1 or -1, got {}",
                self.inner_sign
            )));
        }
        if self.variant == Variant::DiffusionDpo
            && self.timestep_mode != TimestepMode::SingleUniformT
        {
            return Err(Error::invalid("diffusion-dpo only supports single-uniform-t"));
        }
        Ok(())
    }
}

/// Loss of one pair with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoOutput {
    pub loss: f64,
    /// Argument of the sigmoid; positive means the winner is preferred.
    pub margin: f64,
    pub grad: Vec<f64>,
    /// Number of squared-difference terms that entered the margin.
    pub sq_terms: usize,
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic function without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Noised states of one pair at which the margin is evaluated.
///
/// `winner[k]` and `loser[k]` are the states at step `ts[k]`; `scale`
/// multiplies the summed gap difference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStates {
    pub condition: Condition,
    pub ts: Vec<usize>,
    pub winner: Vec<Vec<f64>>,
    pub loser: Vec<Vec<f64>>,
    pub scale: f64,
    /// Noise targets for diffusion-dpo, `None` for inversion-dpo.
    pub noise: Option<(Vec<f64>, Vec<f64>)>,
}

fn check_pair(pair: &PreferencePair, dim: usize) -> Result<()> {
    if pair.winner.len() != dim || pair.loser.len() != dim {
        return Err(Error::invalid(format!(
            "pair members have {} and {} values, model expects {dim}",
            pair.winner.len(),
            pair.loser.len()
        )));
    }
    Ok(())
}

/// Draws the states the configured loss evaluates at. Diffusion-dpo draws `t`
/// then the winner noise then the loser noise; inversion-dpo in single-t mode
/// draws only `t`; full-trajectory inversion draws nothing.
pub fn pair_states<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut RngState,
) -> Result<PairStates> {
    cfg.validate()?;
    let d = model.data_dim();
    check_pair(pair, d)?;
    let steps = schedule.steps();
    match cfg.variant {
        Variant::DiffusionDpo => {
            let t = 1 + rng.below(steps);
            let eps_w = rng.gaussian_vec(d);
            let eps_l = rng.gaussian_vec(d);
            let a = schedule.alpha(t);
            let noised = |x0: &[f64], e: &[f64]| -> Vec<f64> {
                x0.iter()
                    .zip(e)
                    .map(|(x, n)| a.sqrt() * x + (1.0 - a).sqrt() * n)
                    .collect()
            };
            Ok(PairStates {
                condition: pair.condition,
                ts: vec![t],
                winner: vec![noised(&pair.winner, &eps_w)],
                loser: vec![noised(&pair.loser, &eps_l)],
                scale: 1.0,
                noise: Some((eps_w, eps_l)),
            })
        }
        Variant::InversionDpo => {
            let (ts, upto, scale) = match cfg.timestep_mode {
                TimestepMode::FullTrajectory => ((1..=steps).collect::<Vec<_>>(), steps, 1.0),
                TimestepMode::SingleUniformT => {
                    let t = 1 + rng.below(steps);
                    (vec![t], t, steps as f64)
                }
            };
            let mut x0 = pair.winner.clone();
            x0.extend_from_slice(&pair.loser);
            let traj = invert_batch_upto(model, schedule, &x0, &[pair.condition; 2], upto)
                .map_err(|e| match e {
                    Error::NumericDomain(m) => Error::domain(format!("inverted trajectory: {m}")),
                    other => other,
                })?;
            let winner = ts.iter().map(|&t| traj.state(t, 0).to_vec()).collect();
            let loser = ts.iter().map(|&t| traj.state(t, 1).to_vec()).collect();
            Ok(PairStates {
                condition: pair.condition,
                ts,
                winner,
                loser,
                scale,
                noise: None,
            })
        }
    }
}

/// Margin, loss and (optionally) gradient at fixed states. States carry no
/// gradient.
pub fn loss_at_states<M, R>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule,
    states: &PairStates,
    cfg: &DpoConfig,
    with_grad: bool,
) -> Result<DpoOutput>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    cfg.validate()?;
    let d = model.data_dim();
    if reference.data_dim() != d {
        return Err(Error::invalid("reference and model dimensions differ"));
    }
    let n = states.ts.len();
    if n == 0 || states.winner.len() != n || states.loser.len() != n {
        return Err(Error::invalid("pair states are empty or ragged"));
    }
    // Rows ordered (t_0 winner, t_0 loser, t_1 winner, ...).
    let mut x = Vec::with_capacity(2 * n * d);
    let mut ts = Vec::with_capacity(2 * n);
    for k in 0..n {
        for s in [&states.winner[k], &states.loser[k]] {
            if s.len() != d {
                return Err(Error::invalid("pair state has the wrong dimension"));
            }
            x.extend_from_slice(s);
            ts.push(states.ts[k]);
        }
    }
    ensure_finite(&x, "pair states")?;
    let conds = vec![states.condition; 2 * n];
    let query = EpsQuery {
        x: &x,
        t: &ts,
        steps: schedule.steps(),
        conds: &conds,
    };
    let mut tape = Tape::new();
    let pred = if with_grad {
        model.forward_recorded(query, &mut tape)?
    } else {
        model.predict(query)?
    };
    let pred_ref = reference.predict(query)?;

    // d(margin)/d(pred) per row, filled alongside the margin.
    let mut dm = vec![0.0; pred.len()];
    let mut inner = 0.0;
    let sq_terms;
    match (cfg.variant, &states.noise) {
        (Variant::DiffusionDpo, Some((eps_w, eps_l))) => {
            if n != 1 {
                return Err(Error::invalid("diffusion-dpo evaluates one timestep"));
            }
            // Four squared terms: model and reference against each noise.
            for (row, eps, sign) in [(0, eps_w, 1.0), (1, eps_l, -1.0)] {
                let r = row * d..(row + 1) * d;
                let mut delta = 0.0;
                for ((k, p), p0) in r.clone().zip(&pred[r.clone()]).zip(&pred_ref[r.clone()]) {
                    let e = eps[k - row * d];
                    delta += (e - p).powi(2) - (e - p0).powi(2);
                    dm[k] = -cfg.beta * sign * 2.0 * (p - e);
                }
                inner += sign * delta;
            }
            sq_terms = 4;
            let margin = -cfg.beta * states.scale * inner;
            finish(model, &tape, margin, &dm, sq_terms, with_grad)
        }
        (Variant::InversionDpo, None) => {
            let coef = cfg.inner_sign * cfg.beta * states.scale;
            for (row, (p, p0)) in pred.chunks_exact(d).zip(pred_ref.chunks_exact(d)).enumerate() {
                let sign = if row % 2 == 0 { 1.0 } else { -1.0 };
                let mut gap = 0.0;
                for (k, (a, b)) in p.iter().zip(p0).enumerate() {
                    gap += (a - b).powi(2);
                    dm[row * d + k] = coef * sign * 2.0 * (a - b);
                }
                inner += sign * gap;
            }
            sq_terms = 2 * n;
            let margin = coef * inner;
            finish(model, &tape, margin, &dm, sq_terms, with_grad)
        }
        _ => Err(Error::invalid("pair states do not match the configured variant")),
    }
}

fn finish<M: Differentiable + ?Sized>(
    model: &M,
    tape: &Tape,
    margin: f64,
    dm: &[f64],
    sq_terms: usize,
    with_grad: bool,
) -> Result<DpoOutput> {
    if !margin.is_finite() {
        return Err(Error::domain(format!("preference margin is {margin}")));
    }
    let loss = softplus(-margin);
    let mut grad = Vec::new();
    if with_grad {
        let dl = -sigmoid(-margin);
        let upstream: Vec<f64> = dm.iter().map(|v| dl * v).collect();
        grad = vec![0.0; model.num_params()];
        model.backward(tape, &upstream, &mut grad)?;
        ensure_finite(&grad, "preference loss gradient")?;
    }
    Ok(DpoOutput {
        loss,
        margin,
        grad,
        sq_terms,
    })
}

fn require_variant(cfg: &DpoConfig, v: Variant) -> Result<()> {
    if cfg.variant != v {
        return Err(Error::invalid(format!(
            "configured variant is {}, called {v}",
            cfg.variant
        )));
    }
    Ok(())
}

pub fn diffusion_dpo_loss<M, R>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut RngState,
) -> Result<DpoOutput>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    require_variant(cfg, Variant::DiffusionDpo)?;
    dpo_loss(model, reference, schedule, pair, cfg, rng)
}

/// `rng` is only consumed in single-uniform-t mode.
pub fn inversion_dpo_loss<M, R>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut RngState,
) -> Result<DpoOutput>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    require_variant(cfg, Variant::InversionDpo)?;
    dpo_loss(model, reference, schedule, pair, cfg, rng)
}

/// Loss of the configured variant.
pub fn dpo_loss<M, R>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut RngState,
) -> Result<DpoOutput>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let states = pair_states(model, schedule, pair, cfg, rng)?;
    loss_at_states(model, reference, schedule, &states, cfg, true)
}

/// Margin of the configured loss, without gradients.
pub fn implicit_reward_margin<M, R>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut RngState,
) -> Result<f64>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let states = pair_states(model, schedule, pair, cfg, rng)?;
    Ok(loss_at_states(model, reference, schedule, &states, cfg, false)?.margin)
}

/// Batch mean of loss, margin and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub loss: f64,
    pub margin_mean: f64,
    pub grad: Vec<f64>,
    pub sq_terms: usize,
}

/// Mean loss over `pairs`. Pair `i` draws from `substream(seed, [i])`; pairs
/// run in parallel and are reduced in index order.
pub fn batch_loss<M, R>(
    model: &M,
    reference: &R,
    schedule: &NoiseSchedule,
    pairs: &[&PreferencePair],
    cfg: &DpoConfig,
    seed: u64,
) -> Result<BatchOutput>
where
    M: Differentiable + ?Sized,
    R: NoisePredictor + ?Sized,
{
    if pairs.is_empty() {
        return Err(Error::invalid("preference batch is empty"));
    }
    let outs = par::try_map_indexed(pairs.len(), |i| {
        let mut rng = RngState::substream(seed, &[i as u64]);
        dpo_loss(model, reference, schedule, pairs[i], cfg, &mut rng)
    })?;
    let n = outs.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let (mut loss, mut margin, mut sq_terms) = (0.0, 0.0, 0);
    for o in &outs {
        loss += o.loss;
        margin += o.margin;
        sq_terms += o.sq_terms;
        for (g, v) in grad.iter_mut().zip(&o.grad) {
            *g += v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(BatchOutput {
        loss: loss / n,
        margin_mean: margin / n,
        grad,
        sq_terms,
    })
}
