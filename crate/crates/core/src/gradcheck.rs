//! Central finite-difference gradient checking.
//!
//! Only evaluates the objective, so it stays independent of any analytic
//! backward pass it is used to verify.

/// Denominator floor for relative errors of vanishing gradients.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `x` with step `eps`.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + eps;
            let up = f(&probe);
            probe[k] = orig - eps;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        checked: analytic.len(),
        ..Default::default()
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some((i, a, n));
        }
    }
    report
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn check(x: &[f64], analytic: &[f64], eps: f64, f: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    compare(analytic, &numeric_gradient(x, eps, f))
}
