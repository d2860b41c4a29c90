//! Central finite differences for verifying hand-written backward passes.

use super::{GradMap, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compares `analytic` with central differences of `loss`, one parameter
/// tensor at a time, and returns the worst relative error.
pub fn max_relative_error(
    params: &ParameterSet,
    analytic: &GradMap,
    eps: f64,
    mut loss: impl FnMut(&ParameterSet) -> Result<f64>,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::input(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (name, grad) in analytic.iter() {
        let n = params.value(name).len();
        let mut fd = vec![0.0; n];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = probe.value(name).data()[i];
            probe.value_mut(name).data_mut()[i] = orig + eps;
            let plus = loss(&probe)?;
            probe.value_mut(name).data_mut()[i] = orig - eps;
            let minus = loss(&probe)?;
            probe.value_mut(name).data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        worst = worst.max(relative_error(grad.data(), &fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_up_to_roundoff() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = central_difference(&x, 1e-4, |t| t.data().iter().map(|v| v * v).sum());
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_of_zero_vectors_is_zero() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
