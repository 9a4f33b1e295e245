use super::{Tensor, TensorError};

/// Compares the gradient a function reports against central differences.
///
/// `f` maps a parameter tensor to `(loss, ∂loss/∂params)`; the gradient is
/// expected to come from a tape backward. Returns the largest relative error
/// over coordinates, with denominator `max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(mut f: F, params: &Tensor<f64>, epsilon: f64) -> Result<f64, TensorError>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>), TensorError>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(TensorError::InvalidArgument(format!(
            "finite difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (loss, analytic) = f(params)?;
    let (again, analytic_again) = f(params)?;
    if loss.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic(format!("loss {loss} then {again}")));
    }
    if analytic != analytic_again {
        return Err(TensorError::NonDeterministic("gradient changed between calls".into()));
    }
    analytic.expect_same_shape(params, "finite_diff_check")?;

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let base = params.data()[i];
        probe.data_mut()[i] = base + epsilon;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = base - epsilon;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = base;

        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
