//! Central finite-difference verification of backward rules.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::par::{self, Execution};
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over non-kink coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates where the one-sided slopes disagree; reported, not scored.
    pub kinks: Vec<usize>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares the tape gradient of `f` at `point` against central differences
/// `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
///
/// `f` receives a fresh tape and the input variable and returns a scalar.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var> + Sync,
{
    finite_diff_check_with(Execution::Sequential, f, point, h)
}

pub fn finite_diff_check_with<F>(exec: Execution, f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var> + Sync,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let xv = tape.input(point.clone());
    let out = f(&mut tape, xv)?;
    let f0 = tape.value(out).item()?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .input(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let n = point.numel();
    let probes = par::map_indexed(exec, n, |i| -> Result<(f64, f64)> {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        Ok((eval(&plus)?, eval(&minus)?))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        kinks: Vec::new(),
        coordinates: n,
    };
    for (i, probe) in probes.into_iter().enumerate() {
        let (fp, fm) = probe?;
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        if (forward - backward).abs() > 1e-3 * forward.abs().max(backward.abs()).max(1.0) {
            report.kinks.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
