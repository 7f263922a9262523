//! Pair dataset file, little-endian:
//!
//! ```text
//! "IDPR"                      magic, 4 bytes
//! u32 version                 currently 1
//! u64 count
//! u32 dim, u32 components
//! count records of:
//!   u32 condition, u32 pool,
//!   f64 winner[dim], f64 loser[dim],
//!   f64 winner_score, f64 loser_score,
//!   f64 winner_components[components], f64 loser_components[components]
//! ```
//!
//! Plus a CSV export of the scored pools for inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::pairing::PreferencePair;
use super::pool::CandidatePool;
use crate::denoiser::checkpoint_reader::ByteReader;
use crate::denoiser::Condition;
use crate::error::{Error, Result};

pub const PAIRS_MAGIC: &[u8; 4] = b"IDPR";
pub const PAIRS_VERSION: u32 = 1;

pub fn write_pairs(pairs: &[PreferencePair]) -> Result<Vec<u8>> {
    let dim = pairs.first().map_or(0, |p| p.winner.len());
    let ncomp = pairs.first().map_or(0, |p| p.winner_components.len());
    let mut out = Vec::new();
    out.extend_from_slice(PAIRS_MAGIC);
    out.extend_from_slice(&PAIRS_VERSION.to_le_bytes());
    out.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(ncomp as u32).to_le_bytes());
    for (i, p) in pairs.iter().enumerate() {
        if p.winner.len() != dim
            || p.loser.len() != dim
            || p.winner_components.len() != ncomp
            || p.loser_components.len() != ncomp
        {
            return Err(Error::invalid(format!("pair {i} has inconsistent dimensions")));
        }
        out.extend_from_slice(&p.condition.label().to_le_bytes());
        out.extend_from_slice(&p.pool.to_le_bytes());
        let floats = p
            .winner
            .iter()
            .chain(&p.loser)
            .chain([&p.winner_score, &p.loser_score])
            .chain(&p.winner_components)
            .chain(&p.loser_components);
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pairs(bytes: &[u8]) -> Result<Vec<PreferencePair>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != PAIRS_MAGIC {
        return Err(r.error(0, "magic", "expected \"IDPR\"".into()));
    }
    let version = r.u32("version")?;
    if version != PAIRS_VERSION {
        return Err(r.error(4, "version", format!("unsupported version {version}")));
    }
    let count = r.u64("header")? as usize;
    let dim = r.u32("header")? as usize;
    let ncomp = r.u32("header")? as usize;
    let record = 8 + 8 * (2 * dim + 2 + 2 * ncomp);
    if count > 0 && (bytes.len() - r.pos) / record < count {
        return Err(r.error(
            r.pos as u64,
            "pair records",
            format!("truncated: header promises {count} records of {record} bytes"),
        ));
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.pos as u64;
        let condition = Condition::unchecked(r.u32("pair records")?);
        let pool = r.u32("pair records")?;
        let mut floats = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| r.f64("pair records")).collect()
        };
        let winner = floats(dim)?;
        let loser = floats(dim)?;
        let scores = floats(2)?;
        let winner_components = floats(ncomp)?;
        let loser_components = floats(ncomp)?;
        if !(scores[0] > scores[1]) {
            return Err(r.error(
                at,
                "pair records",
                format!("pair {i}: winner score {} not above loser {}", scores[0], scores[1]),
            ));
        }
        pairs.push(PreferencePair {
            condition,
            pool,
            winner,
            loser,
            winner_score: scores[0],
            loser_score: scores[1],
            winner_components,
            loser_components,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.error(r.pos as u64, "trailer", "unexpected trailing bytes".into()));
    }
    Ok(pairs)
}

pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    fs::write(path, write_pairs(pairs)?)?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    read_pairs(&fs::read(path)?)
}

/// One row per candidate:
/// `condition,pool,candidate,aggregate,<component names>,x0_0,x0_1,...`.
pub fn pool_scores_csv(pools: &[CandidatePool], component_names: &[&str]) -> String {
    let mut out = String::from("condition,pool,candidate,aggregate");
    for name in component_names {
        out.push(',');
        out.push_str(name);
    }
    let dim = pools
        .first()
        .and_then(|p| p.candidates.first())
        .map_or(0, |c| c.x0.len());
    for k in 0..dim {
        let _ = write!(out, ",x0_{k}");
    }
    out.push('\n');
    for pool in pools {
        for (i, c) in pool.candidates.iter().enumerate() {
            let _ = write!(out, "{},{},{},{}", pool.condition.label(), pool.index, i, c.score);
            for v in c.components.iter().chain(&c.x0) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs() -> Vec<PreferencePair> {
        (0..3)
            .map(|i| PreferencePair {
                condition: Condition::unchecked(i),
                pool: 7 + i,
                winner: vec![i as f64, 0.5],
                loser: vec![-1.0, i as f64 * 0.25],
                winner_score: 1.0 + i as f64,
                loser_score: -0.5,
                winner_components: vec![0.1, 0.2],
                loser_components: vec![-0.3, -0.4],
            })
            .collect()
    }

    #[test]
    fn round_trip() {
        let p = pairs();
        let bytes = write_pairs(&p).unwrap();
        assert_eq!(read_pairs(&bytes).unwrap(), p);
        assert!(read_pairs(&write_pairs(&[]).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = write_pairs(&pairs()).unwrap();
        assert!(matches!(
            read_pairs(&bytes[..bytes.len() - 1]),
            Err(Error::Format { section: "pair records", .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'O';
        assert!(matches!(read_pairs(&bad), Err(Error::Format { section: "magic", .. })));
        let mut swapped = pairs();
        swapped[1] = swapped[1].swapped();
        let bytes = write_pairs(&swapped).unwrap();
        assert!(read_pairs(&bytes).is_err());
    }
}
