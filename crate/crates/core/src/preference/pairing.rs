use std::fmt;
use std::str::FromStr;

use super::pool::CandidatePool;
use crate::denoiser::Condition;
use crate::error::{Error, Result};

/// A winner/loser pair for one condition. `winner_score > loser_score`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub condition: Condition,
    /// Pool the pair was drawn from; pairs sharing a pool share samples.
    pub pool: u32,
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub winner_score: f64,
    pub loser_score: f64,
    pub winner_components: Vec<f64>,
    pub loser_components: Vec<f64>,
}

impl PreferencePair {
    /// The same pair with winner and loser exchanged. Breaks the ordering
    /// invariant; meant for symmetry checks.
    pub fn swapped(&self) -> Self {
        Self {
            condition: self.condition,
            pool: self.pool,
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            winner_score: self.loser_score,
            loser_score: self.winner_score,
            winner_components: self.loser_components.clone(),
            loser_components: self.winner_components.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStrategy {
    /// One pair: highest against lowest score.
    BestWorst,
    /// Every `(i, j)` with `score_i > score_j`.
    AllOrdered,
}

impl FromStr for PairStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-worst" => Ok(Self::BestWorst),
            "all-ordered" => Ok(Self::AllOrdered),
            other => Err(Error::invalid(format!(
                "unknown pairing strategy {other:?} (expected best-worst or all-ordered)"
            ))),
        }
    }
}

impl fmt::Display for PairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BestWorst => "best-worst",
            Self::AllOrdered => "all-ordered",
        })
    }
}

/// Forms winner/loser pairs from a scored pool. Exact ties never form a pair;
/// a fully tied pool yields no pairs.
pub fn dynamic_pairs(pool: &CandidatePool, strategy: PairStrategy) -> Vec<PreferencePair> {
    let cands = &pool.candidates;
    let make = |w: usize, l: usize| PreferencePair {
        condition: pool.condition,
        pool: pool.index,
        winner: cands[w].x0.clone(),
        loser: cands[l].x0.clone(),
        winner_score: cands[w].score,
        loser_score: cands[l].score,
        winner_components: cands[w].components.clone(),
        loser_components: cands[l].components.clone(),
    };
    match strategy {
        PairStrategy::BestWorst => {
            let mut best = 0;
            let mut worst = 0;
            for (i, c) in cands.iter().enumerate() {
                if c.score > cands[best].score {
                    best = i;
                }
                if c.score < cands[worst].score {
                    worst = i;
                }
            }
            if cands.is_empty() || !(cands[best].score > cands[worst].score) {
                return Vec::new();
            }
            vec![make(best, worst)]
        }
        PairStrategy::AllOrdered => {
            let mut out = Vec::new();
            for i in 0..cands.len() {
                for j in 0..cands.len() {
                    if cands[i].score > cands[j].score {
                        out.push(make(i, j));
                    }
                }
            }
            out
        }
    }
}
