//! Signal-retention schedule `alpha_0..alpha_T` shared by the sampler, the
//! inversion, and every loss.

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 80;
pub const DEFAULT_ALPHA_T: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Log-linear interpolation from `alpha_0 = 1` to `alpha_T = target`.
    pub fn log_linear(steps: usize, target: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::invalid(format!(
                "alpha_T target must lie in (0, 1), got {target}"
            )));
        }
        let log_target = target.ln();
        let mut alpha: Vec<f64> = (0..=steps)
            .map(|t| (log_target * t as f64 / steps as f64).exp())
            .collect();
        alpha[steps] = target;
        Self::from_alphas(alpha)
    }

    /// Schedule with explicit `alpha_0..alpha_T`; all `sigma_t` are zero.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::invalid("alpha must hold alpha_0..alpha_T with T >= 1"));
        }
        if alpha[0] != 1.0 {
            return Err(Error::invalid(format!("alpha_0 must be 1, got {}", alpha[0])));
        }
        for t in 1..alpha.len() {
            if !(alpha[t] < alpha[t - 1]) || !(alpha[t] > 0.0) {
                return Err(Error::invalid(format!(
                    "alpha must be strictly decreasing and positive; alpha[{t}] = {}",
                    alpha[t]
                )));
            }
        }
        let steps = alpha.len() - 1;
        Ok(Self {
            alpha,
            sigma: vec![0.0; steps],
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_final(&self) -> f64 {
        self.alpha[self.steps()]
    }

    /// `sigma_t` for `t` in `1..=T`. Always zero: the deterministic sampler is
    /// the only configuration trajectories are built with.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Position of step `t` on the unit interval, the model's time input.
    pub fn time_fraction(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Log signal-to-noise ratio `log(alpha_t / (1 - alpha_t))`.
    pub fn snr_log(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let a = self.alpha[t];
        Ok((a / (1.0 - a)).ln())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::log_linear(DEFAULT_STEPS, DEFAULT_ALPHA_T).expect("default schedule is valid")
    }
}
