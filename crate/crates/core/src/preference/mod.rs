//! Reward scoring of sampled candidate pools and winner/loser pairing.

mod pairfile;
mod pairing;
mod pool;
mod reward;

pub use pairfile::{load_pairs, pool_scores_csv, read_pairs, save_pairs, write_pairs};
pub use pairing::{dynamic_pairs, PairStrategy, PreferencePair};
pub use pool::{build_pool, build_pools, Candidate, CandidatePool, DEFAULT_POOL_SIZE};
pub use reward::{ModeFidelity, NormPenalty, Reward, RewardSuite, RingStructure, Scored};

/// Pairs from every pool, in pool order.
pub fn pairs_from_pools(pools: &[CandidatePool], strategy: PairStrategy) -> Vec<PreferencePair> {
    pools
        .iter()
        .flat_map(|p| dynamic_pairs(p, strategy))
        .collect()
}
