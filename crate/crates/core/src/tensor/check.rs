//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, TensorError};

/// Relative disagreement between a finite-difference and a reverse-mode value.
pub fn rel_err(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / (1e-8f64).max(fd.abs() + ad.abs())
}

/// Worst-coordinate relative error between reverse-mode gradients of `f` and
/// central differences with probe step `eps`.
///
/// `f` must build a fresh forward pass over the tracked parameter vector it is
/// given and return a scalar. It is re-evaluated 2·n times for the numeric
/// side, so keep it at probe scale.
///
/// The difference quotient carries roundoff noise of order eps_mach·|f|/eps
/// (cancellation between two nearly equal evaluations), so disagreements
/// below that resolution are measurement artifacts, not evidence: they are
/// counted as exact agreement instead of being divided by a tiny gradient
/// magnitude into phantom relative errors. Dead inputs (a softmax attention
/// key bias, say) and large sum-reduced objectives with small per-coordinate
/// gradients both need this. A real defect moves the analytic value by a
/// gradient-sized amount, which clears the floor and is still compared.
pub fn finite_diff_check<F>(f: F, theta: &[f64], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let shape = [theta.len()];
    let mut tape = Tape::new();
    let leaf = tape.leaf(theta.to_vec(), &shape)?;
    let loss = f(&mut tape, &leaf)?;
    if loss.len() != 1 {
        return Err(TensorError::NotScalar { len: loss.len() });
    }
    if !loss.value().is_finite() {
        return Err(TensorError::NonFinite { context: "finite_diff_check" });
    }
    let ad = tape.backward(&loss)?.of_or_zeros(&leaf);

    let eval = |t: &[f64]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.to_vec(), &shape)?;
        let l = f(&mut tape, &leaf)?;
        if l.len() != 1 {
            return Err(TensorError::NotScalar { len: l.len() });
        }
        if !l.value().is_finite() {
            return Err(TensorError::NonFinite { context: "finite_diff_check" });
        }
        Ok(l.value())
    };

    let resolution = 100.0 * f64::EPSILON * loss.value().abs().max(1.0) / eps;
    let mut worst = 0.0f64;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = eval(&probe)?;
        probe[i] = theta[i] - eps;
        let dn = eval(&probe)?;
        probe[i] = theta[i];
        let fd = (up - dn) / (2.0 * eps);
        if (fd - ad[i]).abs() < resolution {
            continue;
        }
        worst = worst.max(rel_err(fd, ad[i]));
    }
    Ok(worst)
}

/// Smallest kink margin seen while evaluating `f` at `theta`.
///
/// Check harnesses resample inputs whose forward pass grazes a ReLU zero,
/// max-pool tie, |·| zero, or clamp edge closer than the probe step.
pub fn forward_kink_margin<F>(f: F, theta: &[f64]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(theta.to_vec(), &[theta.len()])?;
    f(&mut tape, &leaf)?;
    Ok(tape.margins().min())
}
