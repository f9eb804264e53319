use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: String,
    pub value: f64,
}

/// Per-epoch loss values, in the order they were recorded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub records: Vec<LossRecord>,
}

impl LossReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a value. Non-finite values abort training; epochs must
    /// strictly increase per loss name.
    pub fn push(&mut self, epoch: usize, loss: impl Into<String>, value: f64) -> Result<()> {
        let loss = loss.into();
        if !value.is_finite() {
            return Err(Error::Diverged(format!(
                "{loss} = {value} at epoch {epoch}; last finite: {}",
                self.last_finite_summary()
            )));
        }
        if let Some(prev) = self.records.iter().rev().find(|r| r.loss == loss) {
            if prev.epoch >= epoch {
                return Err(Error::Usage(format!(
                    "{loss}: epoch {epoch} after {}",
                    prev.epoch
                )));
            }
        }
        self.records.push(LossRecord { epoch, loss, value });
        Ok(())
    }

    pub fn extend(&mut self, other: LossReport) {
        self.records.extend(other.records);
    }

    pub fn series(&self, loss: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.loss == loss)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn first(&self, loss: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.loss == loss)
            .map(|r| r.value)
    }

    pub fn last(&self, loss: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.loss == loss)
            .map(|r| r.value)
    }

    /// Latest value of every loss name, e.g. `a=0.1, b=2`.
    pub fn last_finite_summary(&self) -> String {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.records {
            if !names.contains(&r.loss.as_str()) {
                names.push(&r.loss);
            }
        }
        if names.is_empty() {
            return "none".into();
        }
        names
            .iter()
            .map(|n| format!("{n}={}", self.last(n).expect("present")))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// CSV with columns `epoch,loss,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "loss", "value"])?;
        for r in &self.records {
            w.write_record([r.epoch.to_string(), r.loss.clone(), r.value.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Stops after `patience` epochs without a relative improvement of 1e-4.
/// A patience of zero never stops.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStop {
    patience: usize,
    best: f64,
    since: usize,
}

impl EarlyStop {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// Returns true when training should stop.
    pub(crate) fn update(&mut self, value: f64) -> bool {
        if !self.best.is_finite() || value < self.best - 1e-4 * self.best.abs().max(1e-8) {
            self.best = value;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_reports_last_values() {
        let mut r = LossReport::new();
        r.push(1, "a", 0.5).unwrap();
        r.push(1, "b", 2.0).unwrap();
        let err = r.push(2, "a", f64::NAN).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
        assert!(err.to_string().contains("a=0.5, b=2"), "{err}");
    }

    #[test]
    fn epochs_strictly_increase() {
        let mut r = LossReport::new();
        r.push(1, "a", 0.5).unwrap();
        assert!(r.push(1, "a", 0.4).is_err());
        r.push(2, "a", 0.4).unwrap();
        assert_eq!(r.series("a"), vec![(1, 0.5), (2, 0.4)]);
    }

    #[test]
    fn csv_layout() {
        let mut r = LossReport::new();
        r.push(1, "gan_normal.L_con", 0.25).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,loss,value\n1,gan_normal.L_con,0.25\n"
        );
    }

    #[test]
    fn early_stop_on_plateau() {
        let mut s = EarlyStop::new(3);
        assert!(!s.update(1.0));
        assert!(!s.update(0.5));
        assert!(!s.update(0.5));
        assert!(!s.update(0.5));
        assert!(s.update(0.5));
        let mut never = EarlyStop::new(0);
        assert!((0..50).all(|_| !never.update(1.0)));
    }
}
