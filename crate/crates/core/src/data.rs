//! Toy conditional data: condition `c` draws from an isotropic Gaussian
//! centred on the `c`-th of `modes` points spaced evenly on a circle.

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::numerics::RngState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyMixture {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for ToyMixture {
    fn default() -> Self {
        Self {
            modes: 8,
            radius: 4.0,
            std: 0.3,
        }
    }
}

/// Flat batch of 2-D points with their conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub conds: Vec<Condition>,
}

impl Dataset {
    pub const DIM: usize = 2;

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.x[i * Self::DIM..(i + 1) * Self::DIM]
    }
}

impl ToyMixture {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || !(self.radius >= 0.0) || !(self.std > 0.0) {
            return Err(Error::invalid(format!("invalid mixture {self:?}")));
        }
        Ok(())
    }

    pub fn condition(&self, label: u32) -> Result<Condition> {
        Condition::new(label, self.modes)
    }

    pub fn conditions(&self) -> Vec<Condition> {
        (0..self.modes as u32).map(Condition::unchecked).collect()
    }

    /// Target mode of condition `c`.
    pub fn mode(&self, c: Condition) -> [f64; 2] {
        let angle = std::f64::consts::TAU * c.index() as f64 / self.modes as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }

    pub fn sample_into(&self, rng: &mut RngState, c: Condition, out: &mut [f64]) {
        let mu = self.mode(c);
        rng.fill_gaussian(out);
        for p in out.chunks_exact_mut(2) {
            p[0] = mu[0] + self.std * p[0];
            p[1] = mu[1] + self.std * p[1];
        }
    }

    /// `per_condition` points for every condition, grouped by condition.
    pub fn dataset(&self, per_condition: usize, rng: &mut RngState) -> Result<Dataset> {
        self.validate()?;
        if per_condition == 0 {
            return Err(Error::invalid("dataset needs at least one point per condition"));
        }
        let mut x = vec![0.0; self.modes * per_condition * 2];
        let mut conds = Vec::with_capacity(self.modes * per_condition);
        for (c, chunk) in self
            .conditions()
            .into_iter()
            .zip(x.chunks_exact_mut(per_condition * 2))
        {
            self.sample_into(rng, c, chunk);
            conds.extend(std::iter::repeat_n(c, per_condition));
        }
        Ok(Dataset { x, conds })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_on_circle() {
        let m = ToyMixture::default();
        for c in m.conditions() {
            let [x, y] = m.mode(c);
            assert!(((x * x + y * y).sqrt() - 4.0).abs() < 1e-12);
        }
        assert_eq!(m.mode(Condition::unchecked(0)), [4.0, 0.0]);
    }

    #[test]
    fn dataset_layout_and_spread() {
        let m = ToyMixture::default();
        let d = m.dataset(2000, &mut RngState::new(3)).unwrap();
        assert_eq!(d.len(), 16_000);
        let c = Condition::unchecked(2);
        let mu = m.mode(c);
        let pts: Vec<&[f64]> = (0..d.len()).filter(|&i| d.conds[i] == c).map(|i| d.point(i)).collect();
        let mean_x = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
        let var_x = pts.iter().map(|p| (p[0] - mean_x).powi(2)).sum::<f64>() / pts.len() as f64;
        assert!((mean_x - mu[0]).abs() < 0.05);
        assert!((var_x - 0.09).abs() < 0.015);
        assert!(m.dataset(0, &mut RngState::new(1)).is_err());
    }
}
