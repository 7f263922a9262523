//! Forward noising, the noise-matching pretraining loss, and the
//! deterministic (`sigma = 0`) DDIM sampler.

use crate::denoiser::{Condition, Differentiable, EpsQuery, NoisePredictor, Tape};
use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, DenseArray, RngState};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sampled,
    Inverted,
}

/// States `x_0..x_T` of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DenseArray>,
    pub direction: Direction,
    pub condition: Condition,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn start(&self) -> &DenseArray {
        &self.states[0]
    }

    pub fn end(&self) -> &DenseArray {
        &self.states[self.states.len() - 1]
    }
}

/// Trajectories of several samples advanced in lockstep.
///
/// `states[t]` holds `x_t` for every row, row-major with `dim` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub states: Vec<Vec<f64>>,
    pub dim: usize,
    pub conds: Vec<Condition>,
    pub direction: Direction,
}

impl TrajectoryBatch {
    pub fn rows(&self) -> usize {
        self.conds.len()
    }

    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn state(&self, t: usize, row: usize) -> &[f64] {
        &self.states[t][row * self.dim..(row + 1) * self.dim]
    }

    pub fn trajectory(&self, row: usize) -> Result<Trajectory> {
        let states = self
            .states
            .iter()
            .map(|s| DenseArray::from_vec(s[row * self.dim..(row + 1) * self.dim].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            states,
            direction: self.direction,
            condition: self.conds[row],
        })
    }
}

/// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &DenseArray,
    t: usize,
    eps: &DenseArray,
) -> Result<DenseArray> {
    schedule.check_step(t)?;
    let a = schedule.alpha(t);
    x0.lincomb(a.sqrt(), eps, (1.0 - a).sqrt())
}

/// Result of a loss evaluation: value plus gradient with respect to the
/// trained model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mean over the batch of `||eps - eps_theta(x_t, t, c)||^2`.
///
/// For each sample in order the generator yields `t` uniform on `1..=T`, then
/// the `dim` noise values.
pub fn base_loss<M: Differentiable + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &[f64],
    conds: &[Condition],
    rng: &mut RngState,
) -> Result<LossGrad> {
    let n = conds.len();
    let d = model.data_dim();
    if n == 0 {
        return Err(Error::invalid("base loss needs a nonempty batch"));
    }
    if x0.len() != n * d {
        return Err(Error::invalid(format!(
            "batch holds {} values, expected {n} rows of dim {d}",
            x0.len()
        )));
    }
    let steps = schedule.steps();
    let mut ts = Vec::with_capacity(n);
    let mut eps = vec![0.0; n * d];
    let mut x_t = vec![0.0; n * d];
    for i in 0..n {
        let t = 1 + rng.below(steps);
        ts.push(t);
        rng.fill_gaussian(&mut eps[i * d..(i + 1) * d]);
        let a = schedule.alpha(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for k in i * d..(i + 1) * d {
            x_t[k] = sa * x0[k] + sn * eps[k];
        }
    }
    let mut tape = Tape::new();
    let pred = model.forward_recorded(
        EpsQuery {
            x: &x_t,
            t: &ts,
            steps,
            conds,
        },
        &mut tape,
    )?;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(n * d);
    for (p, e) in pred.iter().zip(&eps) {
        let diff = p - e;
        loss += diff * diff;
        upstream.push(2.0 * diff * scale);
    }
    let mut grad = vec![0.0; model.num_params()];
    model.backward(&tape, &upstream, &mut grad)?;
    ensure_finite(&grad, "base loss gradient")?;
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

/// One deterministic DDIM step for a batch sharing timestep `t`, in place.
pub(crate) fn ddim_step_rows<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x: &mut [f64],
    t: usize,
    conds: &[Condition],
) -> Result<()> {
    schedule.check_step(t)?;
    let ts = vec![t; conds.len()];
    let eps = model.predict(EpsQuery {
        x,
        t: &ts,
        steps: schedule.steps(),
        conds,
    })?;
    let (a, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let (sa_prev, sn_prev) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    for (xv, e) in x.iter_mut().zip(&eps) {
        let x0_hat = (*xv - sn * e) / sa;
        *xv = sa_prev * x0_hat + sn_prev * e;
    }
    ensure_finite(x, "ddim step")
}

/// `x_{t-1} = sqrt(alpha_{t-1}) x0_hat + sqrt(1 - alpha_{t-1}) eps(x_t, t, c)`.
pub fn ddim_step<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &DenseArray,
    t: usize,
    c: Condition,
) -> Result<DenseArray> {
    if x_t.len() != model.data_dim() {
        return Err(Error::invalid("state dimension differs from the model"));
    }
    let mut x = x_t.as_slice().to_vec();
    ddim_step_rows(model, schedule, &mut x, t, &[c])?;
    DenseArray::new(x_t.shape().to_vec(), x)
}

/// Runs the sampler from `x_T` (rows of `x_t`) down to `x_0`.
pub fn sample_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    conds: &[Condition],
) -> Result<TrajectoryBatch> {
    let d = model.data_dim();
    if x_t.len() != conds.len() * d {
        return Err(Error::invalid("initial noise does not match the batch"));
    }
    ensure_finite(x_t, "initial noise")?;
    let steps = schedule.steps();
    let mut states = vec![Vec::new(); steps + 1];
    let mut x = x_t.to_vec();
    states[steps] = x.clone();
    for t in (1..=steps).rev() {
        ddim_step_rows(model, schedule, &mut x, t, conds)?;
        states[t - 1] = x.clone();
    }
    Ok(TrajectoryBatch {
        states,
        dim: d,
        conds: conds.to_vec(),
        direction: Direction::Sampled,
    })
}

/// Final samples only; skips storing the intermediate states.
pub fn sample_final<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    conds: &[Condition],
) -> Result<Vec<f64>> {
    if x_t.len() != conds.len() * model.data_dim() {
        return Err(Error::invalid("initial noise does not match the batch"));
    }
    ensure_finite(x_t, "initial noise")?;
    let mut x = x_t.to_vec();
    for t in (1..=schedule.steps()).rev() {
        ddim_step_rows(model, schedule, &mut x, t, conds)?;
    }
    Ok(x)
}

pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &DenseArray,
    c: Condition,
) -> Result<Trajectory> {
    sample_batch(model, schedule, x_t.as_slice(), &[c])?.trajectory(0)
}
