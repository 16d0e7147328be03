//! Finite-difference gradient verification.
//!
//! The checks here never touch the reverse pass: they re-run a caller
//! supplied forward closure on perturbed inputs and compare the resulting
//! central differences against whatever gradient the tape produced.

/// Central finite differences of `f` at `x`, one entry per input element.
/// Differences are formed in f64.
pub fn finite_difference_grad<F>(mut f: F, x: &[f32], step: f64) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f32,
{
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        probe[i] = (orig as f64 + step) as f32;
        let up = f(&probe) as f64;
        probe[i] = (orig as f64 - step) as f32;
        let down = f(&probe) as f64;
        probe[i] = orig;
        grad[i] = ((up - down) / (2.0 * step)) as f32;
    }
    grad
}

/// Normwise relative error `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x as f64 - y as f64).powi(2);
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-8)
}
