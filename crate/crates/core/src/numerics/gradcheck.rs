//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{OpKind, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Skip coordinates whose parameter value lies within this distance of
    /// zero (the ReLU kink) when checking elementwise ops on raw inputs.
    pub kink_margin: Option<f64>,
    /// Corrupt this op's gradient rule on the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            kink_margin: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Relative error with the denominator floored at 1, so that coordinates
/// whose true gradient is zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the tape gradient of `f` at `params` with central differences
/// `(f(θ + h·e_k) − f(θ − h·e_k)) / 2h` over every coordinate.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a
/// scalar node.
pub fn gradient_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| t.leaf(p.clone())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.scalar_value(out))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(leaves[pi]);
        for k in 0..param.len() {
            let x = param.data()[k];
            if opts.kink_margin.is_some_and(|m| x.abs() < m) {
                report.skipped += 1;
                continue;
            }
            probe[pi].data_mut()[k] = x + opts.step;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[k] = x - opts.step;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[k] = x;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Probe { param: pi, coord: k });
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, k));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}
