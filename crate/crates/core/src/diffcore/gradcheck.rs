//! Central finite-difference gradient checks against the tape.

use super::{Array, DiffError, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest violation ratio `|analytic - numeric| / max(abs_tol, rel_tol * |numeric|)`.
    pub worst_ratio: f64,
    pub worst_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Numerical gradient of `f` with respect to every entry of every input.
pub fn numeric_gradient(f: &dyn Fn(&[Array]) -> f64, inputs: &[Array], step: f64) -> Vec<Array> {
    let mut work: Vec<Array> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Array::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let fp = f(&work);
            work[k].data_mut()[i] = orig - step;
            let fm = f(&work);
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Builds `build` on a fresh tape with `inputs` as leaves, runs backward, and
/// compares every leaf gradient with central differences of step `step`.
pub fn check(
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
    inputs: &[Array],
    step: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, DiffError> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&mut tape, &leaves)?;
    tape.backward(root)?;
    let analytic: Vec<Array> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, a)| tape.grad(v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let eval = |xs: &[Array]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.leaf(a.clone())).collect();
        match build(&mut t, &vs) {
            Ok(r) => t.value(r).item(),
            Err(_) => f64::NAN,
        }
    };
    let numeric = numeric_gradient(&eval, inputs, step);

    let mut report = GradCheckReport {
        worst_ratio: 0.0,
        worst_abs_error: 0.0,
        checked: 0,
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let err = (x - y).abs();
            let scale = abs_tol.max(rel_tol * y.abs());
            let ratio = if err.is_nan() { f64::INFINITY } else { err / scale };
            report.worst_ratio = report.worst_ratio.max(ratio);
            report.worst_abs_error = report.worst_abs_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
