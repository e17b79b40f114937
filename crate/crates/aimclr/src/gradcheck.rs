//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorRef};

/// Outcome of a gradient check over every coordinate of the input.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor: for gradients below unit magnitude
/// the comparison degrades to absolute error, which keeps finite-difference
/// noise on near-zero coordinates from dominating the report.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences `(f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps)`.
///
/// `f` must deterministically build a scalar loss from the registered input.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorRef) -> Result<TensorRef>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {} outside [1e-7, 1e-3]", eps),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_check input".into(),
            index: x.iter().position(|v| !v.is_finite()).unwrap(),
        });
    }

    // Analytic gradient.
    let mut tape = Tape::new();
    let xt = tape.leaf(x.to_vec(), shape.to_vec(), true)?;
    let loss = f(&mut tape, xt)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::invalid("grad_check", "f must produce a scalar"));
    }
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check loss at x".into(),
            index: 0,
        });
    }
    tape.backward(loss)?;
    let analytic = tape.grad_or_zeros(xt);

    // Central differences, one coordinate at a time.
    let eval = |pt: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let xt = t.leaf(pt.to_vec(), shape.to_vec(), false)?;
        let l = f(&mut t, xt)?;
        Ok(t.value(l))
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
        passed: true,
    };
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        pt[i] = x[i] + eps;
        let fp = eval(&pt)?;
        pt[i] = x[i] - eps;
        let fm = eval(&pt)?;
        pt[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check finite difference".into(),
                index: i,
            });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = rel_err(analytic[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
