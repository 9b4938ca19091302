//! Machine-readable run summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{mean, EvalRecord};

/// Outer iteration whose alignment diagnostic is the reference for the
/// reduction ratio.
pub const ALIGN_REFERENCE_ITER: usize = 10;

/// One (seed, held-out domain) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub held_out: String,
    /// Held-out accuracy of the selected (best-validation) snapshot.
    pub acc_online: f64,
    pub acc_target: f64,
    /// `None` when nothing was evaluated and the initial model was used.
    pub selected_outer_iter: Option<usize>,
    /// Alignment diagnostic at the reference iteration and at the last
    /// evaluated one.
    pub align_reference: Option<f64>,
    pub align_final: Option<f64>,
}

impl RunRow {
    pub fn align_ratio(&self) -> Option<f64> {
        match (self.align_reference, self.align_final) {
            (Some(r), Some(f)) if r > 0.0 => Some(f / r),
            _ => None,
        }
    }
}

/// Picks the alignment values for [`RunRow`] from an evaluation trajectory.
pub fn alignment_summary(evals: &[EvalRecord]) -> (Option<f64>, Option<f64>) {
    let reference = evals
        .iter()
        .find(|e| e.outer_iter >= ALIGN_REFERENCE_ITER)
        .map(|e| e.align_symkl);
    (reference, evals.last().map(|e| e.align_symkl))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_acc_online: f64,
    pub std_acc_online: f64,
    pub mean_acc_target: f64,
    pub std_acc_target: f64,
    /// Median of final/reference alignment ratios over rows that have one.
    pub median_align_ratio: Option<f64>,
}

/// Sample standard deviation (divisor `n − 1`); zero for a single value.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl Aggregate {
    pub fn of(rows: &[RunRow]) -> Self {
        let online: Vec<f64> = rows.iter().map(|r| r.acc_online).collect();
        let target: Vec<f64> = rows.iter().map(|r| r.acc_target).collect();
        let ratios: Vec<f64> = rows.iter().filter_map(RunRow::align_ratio).collect();
        Self {
            mean_acc_online: mean(&online),
            std_acc_online: std_dev(&online),
            mean_acc_target: mean(&target),
            std_acc_target: std_dev(&target),
            median_align_ratio: median(&ratios),
        }
    }

    fn close_to(&self, other: &Self, tol: f64) -> bool {
        let near = |a: f64, b: f64| (a - b).abs() <= tol;
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => near(a, b),
            (None, None) => true,
            _ => false,
        };
        near(self.mean_acc_online, other.mean_acc_online)
            && near(self.std_acc_online, other.std_acc_online)
            && near(self.mean_acc_target, other.mean_acc_target)
            && near(self.std_acc_target, other.std_acc_target)
            && opt(self.median_align_ratio, other.median_align_ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub name: String,
    pub method: String,
    pub rows: Vec<RunRow>,
    pub aggregate: Aggregate,
}

impl RunResult {
    pub fn new(name: impl Into<String>, method: impl Into<String>, rows: Vec<RunRow>) -> Self {
        let aggregate = Aggregate::of(&rows);
        Self {
            schema_version: super::SCHEMA_VERSION,
            name: name.into(),
            method: method.into(),
            rows,
            aggregate,
        }
    }

    /// Recomputes the aggregate from the rows.
    pub fn check_consistent(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::invalid("summary.rows", "no rows"));
        }
        let fresh = Aggregate::of(&self.rows);
        if !fresh.close_to(&self.aggregate, 1e-12) {
            return Err(Error::invalid(
                "summary.aggregate",
                format!("stored {:?} but rows give {:?}", self.aggregate, fresh),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain data serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Loads a summary and rejects it if its aggregate does not match its
    /// rows.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let r: RunResult = serde_json::from_str(&text).map_err(|e| Error::Config {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?;
        r.check_consistent()?;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, acc: f64, ratio: Option<(f64, f64)>) -> RunRow {
        RunRow {
            seed,
            held_out: "unseen".into(),
            acc_online: acc - 0.01,
            acc_target: acc,
            selected_outer_iter: Some(3),
            align_reference: ratio.map(|r| r.0),
            align_final: ratio.map(|r| r.1),
        }
    }

    #[test]
    fn stats_helpers() {
        assert_eq!(std_dev(&[1.0]), 0.0);
        assert!((std_dev(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn aggregate_matches_loop() {
        let rows = vec![row(0, 0.8, Some((2.0, 0.5))), row(1, 0.6, None), row(2, 0.7, Some((1.0, 0.5)))];
        let r = RunResult::new("x", "cmcl", rows);
        let mut s = 0.0;
        for x in [0.8, 0.6, 0.7] {
            s += x;
        }
        assert!((r.aggregate.mean_acc_target - s / 3.0).abs() < 1e-12);
        assert_eq!(r.aggregate.median_align_ratio, Some(0.375));
    }

    #[test]
    fn tampered_summary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.json");
        let mut r = RunResult::new("x", "cmcl", vec![row(0, 0.8, None), row(1, 0.9, None)]);
        r.save(&p).unwrap();
        assert_eq!(RunResult::load(&p).unwrap(), r);
        r.aggregate.mean_acc_target += 1e-6;
        r.save(&p).unwrap();
        assert!(RunResult::load(&p).is_err());
    }

    #[test]
    fn alignment_reference_is_first_eval_at_or_after_ten() {
        let rec = |i, a| EvalRecord {
            outer_iter: i,
            val_acc_online: vec![],
            val_acc_target: vec![],
            align_symkl: a,
        };
        let evals = vec![rec(5, 9.0), rec(10, 4.0), rec(15, 3.0), rec(20, 1.0)];
        assert_eq!(alignment_summary(&evals), (Some(4.0), Some(1.0)));
        assert_eq!(alignment_summary(&evals[..1]), (None, Some(9.0)));
        assert_eq!(alignment_summary(&[]), (None, None));
    }
}
