use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{EvalRecord, StepLosses};
use crate::error::Result;

pub const METRICS_HEADER: &str =
    "outer_iter,stage,inner_iter,loss_ce,loss_mean,loss_cov,loss_dsc,loss_cdl,align_symkl,val_acc_online,val_acc_target";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    C,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
        })
    }
}

/// One optimizer step. Evaluation columns are filled only on the last step
/// of an evaluated outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub outer_iter: usize,
    pub stage: Stage,
    pub inner_iter: usize,
    /// Objective differentiated at this step (not a CSV column).
    pub loss_total: f64,
    pub loss_ce: Option<f64>,
    pub loss_mean: Option<f64>,
    pub loss_cov: Option<f64>,
    pub loss_dsc: Option<f64>,
    pub loss_cdl: Option<f64>,
    pub align_symkl: Option<f64>,
    /// Per source domain; empty unless evaluated.
    pub val_acc_online: Vec<f64>,
    pub val_acc_target: Vec<f64>,
}

impl MetricsRow {
    pub(crate) fn from_step(outer_iter: usize, stage: Stage, inner_iter: usize, l: &StepLosses) -> Self {
        Self {
            outer_iter,
            stage,
            inner_iter,
            loss_total: l.total,
            loss_ce: l.ce,
            loss_mean: l.mean,
            loss_cov: l.cov,
            loss_dsc: l.dsc,
            loss_cdl: l.cdl,
            align_symkl: None,
            val_acc_online: Vec::new(),
            val_acc_target: Vec::new(),
        }
    }

    pub(crate) fn attach_eval(&mut self, e: &EvalRecord) {
        self.align_symkl = Some(e.align_symkl);
        self.val_acc_online = e.val_acc_online.clone();
        self.val_acc_target = e.val_acc_target.clone();
    }

    fn mean_or_none(xs: &[f64]) -> Option<f64> {
        (!xs.is_empty()).then(|| super::mean(xs))
    }

    pub fn csv_line(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.outer_iter,
            self.stage,
            self.inner_iter,
            cell(self.loss_ce),
            cell(self.loss_mean),
            cell(self.loss_cov),
            cell(self.loss_dsc),
            cell(self.loss_cdl),
            cell(self.align_symkl),
            cell(Self::mean_or_none(&self.val_acc_online)),
            cell(Self::mean_or_none(&self.val_acc_target)),
        )
    }
}

/// Writes the header and one line per row. Floats use the shortest
/// representation that parses back to the same value; absent values are
/// empty cells.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_for_no_rows() {
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn row_formatting() {
        let mut r = MetricsRow::from_step(
            3,
            Stage::B,
            2,
            &StepLosses {
                total: 0.5,
                dsc: Some(0.5),
                ..Default::default()
            },
        );
        assert_eq!(r.csv_line(), "3,B,2,,,,0.5,,,,");
        r.attach_eval(&EvalRecord {
            outer_iter: 3,
            val_acc_online: vec![0.5, 1.0],
            val_acc_target: vec![0.25, 0.25],
            align_symkl: 1e-7,
        });
        assert_eq!(r.csv_line(), "3,B,2,,,,0.5,,1e-7,0.75,0.25");
    }
}
