//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Coordinates whose analytic and numeric derivatives are both below this
/// fraction of `max(1, |f(x)|)` count as agreeing at zero. Central
/// differences of an exactly flat direction only resolve roundoff of order
/// `eps_mach * |f| / h`, which the relative-error ratio would otherwise
/// report as a total mismatch.
pub const ZERO_FLOOR: f64 = 1e-8;

/// Largest coordinate-wise relative error between the taped gradient of
/// `f` at `x` and its central-difference estimate with step `h`.
///
/// The error at a coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_coords(f, x, h, None)
}

/// [`grad_check`] restricted to a subset of flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_report(&f, x, h, coords)?;
    Ok(report.max_rel_error)
}

/// Per-call diagnostics behind [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate of the worst error.
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn grad_check_report<F>(f: &F, x: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let f0 = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grad = tape.grad(xv).expect("leaf requires grad").to_vec();

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let floor = ZERO_FLOOR * f0.abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let analytic = grad[i];
        report.analytic.push(analytic);
        report.numeric.push(numeric);
        if analytic.abs() < floor && numeric.abs() < floor {
            continue;
        }
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
    }
    Ok(report)
}
