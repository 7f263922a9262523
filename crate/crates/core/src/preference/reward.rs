use crate::data::ToyMixture;
use crate::denoiser::Condition;
use crate::error::{Error, Result};

/// Scalar reward `r(c, x0)`; higher is better.
pub trait Reward: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, c: Condition, x0: &[f64]) -> f64;
}

/// `-||x0 - mode(c)||`: how close a sample lands to its condition's mode.
#[derive(Debug, Clone)]
pub struct ModeFidelity {
    pub mixture: ToyMixture,
}

impl Reward for ModeFidelity {
    fn name(&self) -> &str {
        "mode_fidelity"
    }

    fn score(&self, c: Condition, x0: &[f64]) -> f64 {
        let mu = self.mixture.mode(c);
        -(x0[0] - mu[0]).hypot(x0[1] - mu[1])
    }
}

/// `-| ||x0|| - radius |`: distance from the ring the modes sit on.
#[derive(Debug, Clone)]
pub struct RingStructure {
    pub radius: f64,
}

impl Reward for RingStructure {
    fn name(&self) -> &str {
        "ring_structure"
    }

    fn score(&self, _c: Condition, x0: &[f64]) -> f64 {
        -(x0.iter().map(|v| v * v).sum::<f64>().sqrt() - self.radius).abs()
    }
}

/// `-scale * ||x0||`.
#[derive(Debug, Clone)]
pub struct NormPenalty {
    pub scale: f64,
}

impl Reward for NormPenalty {
    fn name(&self) -> &str {
        "norm_penalty"
    }

    fn score(&self, _c: Condition, x0: &[f64]) -> f64 {
        -self.scale * x0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Aggregate and per-component rewards of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub aggregate: f64,
    pub components: Vec<f64>,
}

pub struct RewardSuite {
    rewards: Vec<Box<dyn Reward>>,
}

impl std::fmt::Debug for RewardSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl RewardSuite {
    pub fn new(rewards: Vec<Box<dyn Reward>>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::invalid("reward suite needs at least one reward"));
        }
        Ok(Self { rewards })
    }

    /// Mode fidelity and ring structure on `mixture`.
    pub fn toy(mixture: ToyMixture) -> Self {
        Self {
            rewards: vec![
                Box::new(ModeFidelity { mixture }),
                Box::new(RingStructure {
                    radius: mixture.radius,
                }),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.rewards.iter().map(|r| r.name()).collect()
    }

    /// Arithmetic mean of the component rewards.
    pub fn aggregate(&self, c: Condition, x0: &[f64]) -> Result<Scored> {
        let mut components = Vec::with_capacity(self.rewards.len());
        for r in &self.rewards {
            let v = r.score(c, x0);
            if !v.is_finite() {
                return Err(Error::domain(format!("reward {} returned {v}", r.name())));
            }
            components.push(v);
        }
        let aggregate = components.iter().sum::<f64>() / components.len() as f64;
        Ok(Scored {
            aggregate,
            components,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(&'static str, f64);

    impl Reward for Fixed {
        fn name(&self) -> &str {
            self.0
        }
        fn score(&self, _: Condition, _: &[f64]) -> f64 {
            self.1
        }
    }

    const C: Condition = Condition::unchecked(0);

    #[test]
    fn single_reward_is_identity() {
        let suite = RewardSuite::new(vec![Box::new(Fixed("a", 0.37))]).unwrap();
        assert_eq!(suite.aggregate(C, &[0.0, 0.0]).unwrap().aggregate, 0.37);
    }

    #[test]
    fn mean_of_components() {
        let suite =
            RewardSuite::new(vec![Box::new(Fixed("a", 0.2)), Box::new(Fixed("b", 0.8))]).unwrap();
        let s = suite.aggregate(C, &[0.0, 0.0]).unwrap();
        assert!((s.aggregate - 0.5).abs() < 1e-15);
        assert_eq!(s.components, vec![0.2, 0.8]);
    }

    #[test]
    fn hand_placed_point() {
        // Condition 0 has its mode at (4, 0). At (4, 3):
        // distance = 3, norm = 5, so mean(-3, -0.5) = -1.75.
        let mixture = ToyMixture::default();
        let suite = RewardSuite::new(vec![
            Box::new(ModeFidelity { mixture }),
            Box::new(NormPenalty { scale: 0.1 }),
        ])
        .unwrap();
        let s = suite.aggregate(C, &[4.0, 3.0]).unwrap();
        assert!((s.aggregate + 1.75).abs() < 1e-12);

        // Shipped suite at the same point: ring deviation is |5 - 4| = 1,
        // so mean(-3, -1) = -2.
        let s = RewardSuite::toy(mixture).aggregate(C, &[4.0, 3.0]).unwrap();
        assert!((s.aggregate + 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_component_names_reward() {
        let suite =
            RewardSuite::new(vec![Box::new(Fixed("ok", 1.0)), Box::new(Fixed("bad", f64::NAN))])
                .unwrap();
        match suite.aggregate(C, &[0.0, 0.0]) {
            Err(Error::NumericDomain(msg)) => assert!(msg.contains("bad")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RewardSuite::new(Vec::new()).is_err());
    }
}
