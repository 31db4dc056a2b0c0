//! Central finite differences used as an independent gradient oracle.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Floor on the reference scale in [`relative_error`].
const SCALE_FLOOR: f64 = 1e-8;

/// `∂f/∂x_k ≈ (f(x + h e_k) − f(x − h e_k)) / 2h` for every coordinate.
pub fn finite_diff_gradient<F>(mut objective: F, point: &DVector<f64>, step: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    let mut grad = DVector::zeros(point.len());
    let mut probe = point.clone();
    for k in 0..point.len() {
        probe[k] = point[k] + step;
        let plus = objective(&probe)?;
        probe[k] = point[k] - step;
        let minus = objective(&probe)?;
        probe[k] = point[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {k}")));
        }
        grad[k] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// `max_k |a_k − b_k| / max(‖b‖_∞, 1e-8)` with `b` the reference.
pub fn relative_error(analytic: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let scale = reference.amax().max(SCALE_FLOOR);
    (analytic - reference).amax() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let p = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let g = finite_diff_gradient(|x| Ok(x.norm_squared()), &p, 1e-5).unwrap();
        assert!((g - &p * 2.0).amax() < 1e-8);
    }

    #[test]
    fn linear_gradient_is_exact() {
        let c = DVector::from_vec(vec![1.0, -2.0]);
        let g = finite_diff_gradient(|x| Ok(c.dot(x)), &DVector::zeros(2), 0.5).unwrap();
        assert_eq!(g, c);
    }

    #[test]
    fn rejects_bad_input() {
        let p = DVector::zeros(1);
        assert!(finite_diff_gradient(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(matches!(
            finite_diff_gradient(|_| Ok(f64::NAN), &p, 1e-3),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(relative_error(&DVector::from_vec(vec![1e-9]), &DVector::zeros(1)), 0.1);
    }
}
