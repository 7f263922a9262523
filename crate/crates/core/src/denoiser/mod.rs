//! The noise predictor `eps(x_t, t, c)`.
//!
//! [`NoisePredictor`] is what the sampler, the inversion, and the diagnostics
//! need. [`Differentiable`] adds the recorded forward pass and analytic
//! backward pass the losses use. [`Denoiser`] is the shipped three-layer MLP;
//! [`stubs`] holds closed-form models used as test oracles.

mod checkpoint;
pub(crate) mod checkpoint_reader {
    pub(crate) use super::checkpoint::ByteReader;
}
mod mlp;
pub mod stubs;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use mlp::{Architecture, Denoiser};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Class label of a toy condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Condition(u32);

impl Condition {
    pub fn new(label: u32, num_conditions: usize) -> Result<Self> {
        if (label as usize) >= num_conditions {
            return Err(Error::invalid(format!(
                "condition {label} out of range for {num_conditions} conditions"
            )));
        }
        Ok(Self(label))
    }

    /// Label without a range check; models validate on use.
    pub const fn unchecked(label: u32) -> Self {
        Self(label)
    }

    pub fn label(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A batch of rows to evaluate, all at integer timesteps on a `steps`-step
/// schedule.
#[derive(Debug, Clone, Copy)]
pub struct EpsQuery<'a> {
    /// `rows * data_dim` values, row-major.
    pub x: &'a [f64],
    /// Timestep per row, each in `0..=steps`.
    pub t: &'a [usize],
    pub steps: usize,
    pub conds: &'a [Condition],
}

impl EpsQuery<'_> {
    pub fn rows(&self) -> usize {
        self.t.len()
    }

    pub(crate) fn validate(&self, data_dim: usize, num_conditions: Option<usize>) -> Result<()> {
        let rows = self.t.len();
        if self.conds.len() != rows {
            return Err(Error::invalid(format!(
                "{} conditions for {rows} rows",
                self.conds.len()
            )));
        }
        if self.x.len() != rows * data_dim {
            return Err(Error::invalid(format!(
                "input holds {} values, expected {rows} rows of dim {data_dim}",
                self.x.len()
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("schedule length must be positive"));
        }
        if let Some(&t) = self.t.iter().find(|&&t| t > self.steps) {
            return Err(Error::invalid(format!("timestep {t} beyond {}", self.steps)));
        }
        if let Some(n) = num_conditions {
            if let Some(c) = self.conds.iter().find(|c| c.index() >= n) {
                return Err(Error::invalid(format!(
                    "condition {} out of range for {n} conditions",
                    c.label()
                )));
            }
        }
        Ok(())
    }
}

pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;

    /// Predicted noise for every row of `query`, `rows * data_dim` values.
    fn predict(&self, query: EpsQuery<'_>) -> Result<Vec<f64>>;

    /// Single-sample prediction.
    fn eps(&self, x: &DenseArray, t: usize, steps: usize, c: Condition) -> Result<DenseArray> {
        if x.len() != self.data_dim() {
            return Err(Error::invalid(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.data_dim()
            )));
        }
        let out = self.predict(EpsQuery {
            x: x.as_slice(),
            t: &[t],
            steps,
            conds: &[c],
        })?;
        DenseArray::new(x.shape().to_vec(), out)
    }
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    rows: usize,
    buffers: Vec<Vec<f64>>,
    recorded: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub(crate) fn record(&mut self, rows: usize, buffers: Vec<Vec<f64>>) {
        self.rows = rows;
        self.buffers = buffers;
        self.recorded = true;
    }

    pub(crate) fn buffers(&self) -> Result<&[Vec<f64>]> {
        if !self.recorded {
            return Err(Error::State("backward called before a forward pass".into()));
        }
        Ok(&self.buffers)
    }
}

/// A noise predictor with a flat parameter vector and exact gradients.
pub trait Differentiable: NoisePredictor {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Forward pass that records what [`Differentiable::backward`] needs.
    fn forward_recorded(&self, query: EpsQuery<'_>, tape: &mut Tape) -> Result<Vec<f64>>;

    /// Accumulates `d(upstream . output)/d(params)` into `grad`.
    fn backward(&self, tape: &Tape, upstream: &[f64], grad: &mut [f64]) -> Result<()>;
}

/// Denoised estimate `(x_t - sqrt(1 - alpha_t) eps(x_t, t, c)) / sqrt(alpha_t)`.
pub fn x0_predict<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &crate::schedule::NoiseSchedule,
    x_t: &DenseArray,
    t: usize,
    c: Condition,
) -> Result<DenseArray> {
    schedule.check_step(t)?;
    let eps = model.eps(x_t, t, schedule.steps(), c)?;
    let a = schedule.alpha(t);
    x_t.lincomb(1.0 / a.sqrt(), &eps, -(1.0 - a).sqrt() / a.sqrt())
}
