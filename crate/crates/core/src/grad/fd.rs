use crate::scalar::Scalar;

use super::{GradError, Tensor};

/// Central-difference gradient estimate of `f` at `point`.
///
/// Each component is perturbed by `h` in both directions, so the estimate
/// carries an O(h^2) truncation error. This is the independent oracle the
/// tests compare the tape's backward pass against; it never touches the
/// tape machinery.
pub fn finite_difference<S, F>(mut f: F, point: &Tensor<S>, h: S) -> Result<Tensor<S>, GradError>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S, GradError>,
{
    if h <= S::zero() {
        return Err(GradError::BadEpsilon(h.to_f64()));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape().to_vec());
    let two = S::from_f64(2.0);
    for i in 0..point.len() {
        let x = point.values()[i];
        probe.values_mut()[i] = x + h;
        let fp = f(&probe)?;
        probe.values_mut()[i] = x - h;
        let fm = f(&probe)?;
        probe.values_mut()[i] = x;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradError::NonFinite("finite_difference"));
        }
        grad.values_mut()[i] = (fp - fm) / (two * h);
    }
    Ok(grad)
}
