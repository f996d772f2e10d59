//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward evaluation, so it stays
//! independent of the backward implementations it validates. Storage is f32,
//! hence the default step of 1e-2: large enough that the symmetric difference
//! rises above rounding noise, small enough that truncation error stays
//! below the tolerances used in the test suites.

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff(mut f: impl FnMut(&[f32]) -> f32, x: &[f32], h: f32) -> Vec<f32> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe) as f64;
        probe[i] = orig - h;
        let minus = f(&probe) as f64;
        probe[i] = orig;
        grad[i] = ((plus - minus) / (2.0 * h as f64)) as f32;
    }
    grad
}

/// Worst element-wise deviation between analytic and numeric gradients,
/// measured as `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f32], numeric: &[f32], floor: f32) -> f32 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f32::max)
}

/// Asserts agreement between analytic and finite-difference gradients.
///
/// `tol` is relative for entries larger than 1.0 in magnitude and absolute
/// below that, which keeps near-zero gradients from demanding impossible
/// relative precision out of f32 forward evaluations.
pub fn assert_grads_close(analytic: &[f32], numeric: &[f32], tol: f32, what: &str) {
    let err = max_rel_error(analytic, numeric, 1.0);
    assert!(
        err <= tol,
        "{what}: gradient mismatch, max relative error {err:.3e} > {tol:.1e}"
    );
}
