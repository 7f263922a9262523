//! Closed-form noise predictors with known behavior, used as oracles.

use super::{Differentiable, EpsQuery, NoisePredictor, Tape};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// `eps(x, t) = A x + b`, independent of `t` and the condition.
///
/// Parameters are `A` row-major followed by `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    dim: usize,
    params: Vec<f64>,
}

impl AffineModel {
    pub fn new(matrix: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let dim = bias.len();
        if dim == 0 || matrix.len() != dim * dim {
            return Err(Error::invalid("affine stub needs a square matrix matching the bias"));
        }
        let mut params = matrix;
        params.extend(bias);
        Ok(Self { dim, params })
    }

    /// `eps(x) = scale * x`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = scale;
        }
        Self::new(m, vec![0.0; dim]).expect("square by construction")
    }

    /// `eps(x) = value` everywhere.
    pub fn constant(value: Vec<f64>) -> Self {
        let dim = value.len();
        Self::new(vec![0.0; dim * dim], value).expect("square by construction")
    }

    pub fn matrix(&self) -> &[f64] {
        &self.params[..self.dim * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.dim * self.dim..]
    }
}

impl NoisePredictor for AffineModel {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, query: EpsQuery<'_>) -> Result<Vec<f64>> {
        query.validate(self.dim, None)?;
        let (a, b, d) = (self.matrix(), self.bias(), self.dim);
        let mut out = Vec::with_capacity(query.x.len());
        for row in query.x.chunks_exact(d) {
            for i in 0..d {
                let dot: f64 = a[i * d..(i + 1) * d].iter().zip(row).map(|(p, q)| p * q).sum();
                out.push(dot + b[i]);
            }
        }
        Ok(out)
    }
}

impl Differentiable for AffineModel {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_recorded(&self, query: EpsQuery<'_>, tape: &mut Tape) -> Result<Vec<f64>> {
        let out = self.predict(query)?;
        tape.record(query.rows(), vec![query.x.to_vec()]);
        Ok(out)
    }

    fn backward(&self, tape: &Tape, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let x = &tape.buffers()?[0];
        let d = self.dim;
        if upstream.len() != x.len() || grad.len() != self.params.len() {
            return Err(Error::invalid("gradient buffers do not match the affine stub"));
        }
        for (row, up) in x.chunks_exact(d).zip(upstream.chunks_exact(d)) {
            for i in 0..d {
                for j in 0..d {
                    grad[i * d + j] += up[i] * row[j];
                }
                grad[d * d + i] += up[i];
            }
        }
        Ok(())
    }
}

/// Returns the exact noise that produced `x_t` from a known clean point:
/// `(x_t - sqrt(alpha_t) x0) / sqrt(1 - alpha_t)`. Has no parameters.
#[derive(Debug, Clone)]
pub struct TrueNoiseModel {
    pub schedule: NoiseSchedule,
    pub x0: Vec<f64>,
}

impl NoisePredictor for TrueNoiseModel {
    fn data_dim(&self) -> usize {
        self.x0.len()
    }

    fn predict(&self, query: EpsQuery<'_>) -> Result<Vec<f64>> {
        query.validate(self.x0.len(), None)?;
        if query.steps != self.schedule.steps() {
            return Err(Error::invalid("true-noise stub queried on a different schedule"));
        }
        let d = self.x0.len();
        let mut out = Vec::with_capacity(query.x.len());
        for (row, &t) in query.x.chunks_exact(d).zip(query.t) {
            let a = self.schedule.alpha(t);
            if a >= 1.0 {
                return Err(Error::invalid("true noise is undefined at alpha = 1"));
            }
            for (x, x0) in row.iter().zip(&self.x0) {
                out.push((x - a.sqrt() * x0) / (1.0 - a).sqrt());
            }
        }
        Ok(out)
    }
}

impl Differentiable for TrueNoiseModel {
    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn forward_recorded(&self, query: EpsQuery<'_>, tape: &mut Tape) -> Result<Vec<f64>> {
        let out = self.predict(query)?;
        tape.record(query.rows(), Vec::new());
        Ok(out)
    }

    fn backward(&self, tape: &Tape, _upstream: &[f64], _grad: &mut [f64]) -> Result<()> {
        tape.buffers().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Condition;
    use crate::numerics::{finite_diff_coords, relative_error};

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let m = AffineModel::new(vec![0.3, -0.2, 0.5, 0.1], vec![0.05, -0.4]).unwrap();
        let x = [1.0, 2.0, -0.5, 0.25];
        let conds = [Condition::unchecked(0); 2];
        let q = |mm: &AffineModel| {
            mm.predict(EpsQuery { x: &x, t: &[1, 2], steps: 2, conds: &conds })
        };
        let mut tape = Tape::new();
        let out = m
            .forward_recorded(EpsQuery { x: &x, t: &[1, 2], steps: 2, conds: &conds }, &mut tape)
            .unwrap();
        let mut g = vec![0.0; 6];
        m.backward(&tape, &out.iter().map(|o| 2.0 * o).collect::<Vec<_>>(), &mut g)
            .unwrap();
        let fd = finite_diff_coords(
            |p| {
                let mm = AffineModel::new(p[..4].to_vec(), p[4..].to_vec())?;
                Ok(q(&mm)?.iter().map(|v| v * v).sum())
            },
            m.params(),
            &(0..6).collect::<Vec<_>>(),
            1e-5,
        )
        .unwrap();
        for i in 0..6 {
            assert!(relative_error(g[i], fd[i], 1e-8) < 1e-8);
        }
    }
}
