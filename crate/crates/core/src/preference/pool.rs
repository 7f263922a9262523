use super::reward::RewardSuite;
use crate::denoiser::{Condition, NoisePredictor};
use crate::diffusion::sample_final;
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::par;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_POOL_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x0: Vec<f64>,
    pub score: f64,
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub condition: Condition,
    /// Index of the pool among those built for its condition.
    pub index: u32,
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.score).collect()
    }
}

/// Samples `k` candidates for condition `c` from fresh Gaussian `x_T` draws
/// (drawn row by row from `rng`) through the deterministic sampler, then
/// scores each.
pub fn build_pool<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    suite: &RewardSuite,
    c: Condition,
    k: usize,
    rng: &mut RngState,
) -> Result<CandidatePool> {
    if k < 2 {
        return Err(Error::invalid(format!("a pool needs at least 2 candidates, got {k}")));
    }
    let d = model.data_dim();
    let x_t = rng.gaussian_vec(k * d);
    let x0 = sample_final(model, schedule, &x_t, &vec![c; k])?;
    let candidates = x0
        .chunks_exact(d)
        .map(|x| {
            let scored = suite.aggregate(c, x)?;
            Ok(Candidate {
                x0: x.to_vec(),
                score: scored.aggregate,
                components: scored.components,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool {
        condition: c,
        index: 0,
        candidates,
    })
}

/// `pools_per_condition` pools for each condition, ordered by condition then
/// pool index. Pool `(c, i)` draws from the substream `(seed, c, i)`, so the
/// result is independent of how the work is scheduled.
pub fn build_pools<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    suite: &RewardSuite,
    conds: &[Condition],
    pools_per_condition: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<CandidatePool>> {
    let jobs: Vec<(Condition, u32)> = conds
        .iter()
        .flat_map(|&c| (0..pools_per_condition as u32).map(move |i| (c, i)))
        .collect();
    par::map_slice(&jobs, |&(c, i)| {
        let mut rng = RngState::substream(seed, &[c.label() as u64, i as u64]);
        let mut pool = build_pool(model, schedule, suite, c, k, &mut rng)?;
        pool.index = i;
        Ok(pool)
    })
    .into_iter()
    .collect()
}
