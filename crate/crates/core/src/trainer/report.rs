use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "step,loss,margin_mean,pair_accuracy,wallclock_ms";

/// One logged point. Pretraining leaves the preference columns empty.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub margin_mean: Option<f64>,
    pub pair_accuracy: Option<f64>,
    pub wallclock_ms: u64,
    /// Mean aggregate reward of generated samples, when probed.
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; steps must strictly increase and values be finite.
    pub fn push(&mut self, record: TrainRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::invalid(format!(
                    "report step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        let finite = record.loss.is_finite()
            && [record.margin_mean, record.pair_accuracy, record.reward]
                .iter()
                .flatten()
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain(format!("non-finite value in report at step {}", record.step)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.loss,
                opt(r.margin_mean),
                opt(r.pair_accuracy),
                r.wallclock_ms
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, loss: f64) -> TrainRecord {
        TrainRecord {
            step,
            loss,
            margin_mean: Some(0.5),
            pair_accuracy: None,
            wallclock_ms: 0,
            reward: None,
        }
    }

    #[test]
    fn csv_layout() {
        let mut r = TrainReport::new();
        r.push(rec(0, 0.25)).unwrap();
        r.push(rec(50, 0.125)).unwrap();
        assert_eq!(r.to_csv(), format!("{REPORT_HEADER}\n0,0.25,0.5,,0\n50,0.125,0.5,,0\n"));
    }

    #[test]
    fn rejects_bad_records() {
        let mut r = TrainReport::new();
        r.push(rec(5, 1.0)).unwrap();
        assert!(r.push(rec(5, 1.0)).is_err());
        assert!(r.push(rec(6, f64::NAN)).is_err());
        assert_eq!(r.records().len(), 1);
    }
}
