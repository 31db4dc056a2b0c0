//! Norm-constrained weighted least squares.
//!
//! `min_{‖v‖₂ ≤ R} Σ_k μ_k (t_k − φ_kᵀ v)²` is solved through the SVD of
//! `diag(√μ)Φ`. When the minimum-norm unconstrained solution lies outside the
//! ball, the ridge multiplier `λ` is bisected until `‖v(λ)‖₂ = R`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on `‖v‖₂ − R` for an active constraint.
pub const RADIUS_TOL: f64 = 1e-10;

/// Relative cutoff below which singular values are treated as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub v: DVector<f64>,
    /// `‖t − Φ v‖_{L₂(μ)}`.
    pub residual: f64,
    /// Whether the norm constraint is active.
    pub constrained: bool,
    /// Ridge multiplier at the solution (0 when unconstrained).
    pub lambda: f64,
}

/// `‖t − Φ v‖_{L₂(μ)}`.
pub fn weighted_residual(
    target: &DVector<f64>,
    features: &DMatrix<f64>,
    measure: &DVector<f64>,
    v: &DVector<f64>,
) -> f64 {
    let diff = target - features * v;
    diff.iter()
        .zip(measure.iter())
        .map(|(d, m)| m * d * d)
        .sum::<f64>()
        .sqrt()
}

/// Solves the trust-region least-squares problem; `features` has one row per
/// support point and `measure` holds non-negative weights.
pub fn best_linear_fit(
    target: &DVector<f64>,
    features: &DMatrix<f64>,
    measure: &DVector<f64>,
    radius: f64,
) -> Result<LinearFit> {
    let n = features.nrows();
    if target.len() != n || measure.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "target {} and measure {} must match {} feature rows",
            target.len(),
            measure.len(),
            n
        )));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be finite and ≥ 0")));
    }
    if measure.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(Error::InvalidArgument("measure must be non-negative".into()));
    }
    if target.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("fit target".into()));
    }
    let p = features.ncols();
    let sqrt_mu = measure.map(f64::sqrt);
    let mut weighted = features.clone();
    for (k, mut row) in weighted.row_iter_mut().enumerate() {
        row *= sqrt_mu[k];
    }
    let b = target.component_mul(&sqrt_mu);
    if n == 0 || p == 0 || radius == 0.0 {
        let v = DVector::zeros(p);
        let residual = weighted_residual(target, features, measure, &v);
        return Ok(LinearFit {
            v,
            residual,
            constrained: radius == 0.0 && p > 0,
            lambda: 0.0,
        });
    }

    let svd = weighted.svd(true, true);
    let u = svd.u.as_ref().expect("requested");
    let v_t = svd.v_t.as_ref().expect("requested");
    let sing = &svd.singular_values;
    let s_max = sing.max();
    let cutoff = RANK_TOL * s_max.max(f64::MIN_POSITIVE);
    let c = u.tr_mul(&b);

    let solve = |lambda: f64| -> DVector<f64> {
        let coeffs = DVector::from_fn(sing.len(), |j, _| {
            let s = sing[j];
            if s <= cutoff {
                0.0
            } else {
                s / (s * s + lambda) * c[j]
            }
        });
        v_t.tr_mul(&coeffs)
    };

    let v0 = solve(0.0);
    if v0.norm() <= radius {
        let residual = weighted_residual(target, features, measure, &v0);
        return Ok(LinearFit {
            v: v0,
            residual,
            constrained: false,
            lambda: 0.0,
        });
    }

    // ‖v(λ)‖ ≤ s_max ‖c‖ / λ, so `hi` starts feasible and stays feasible.
    let mut lo = 0.0;
    let mut hi = s_max * c.norm() / radius;
    let mut v = solve(hi);
    for _ in 0..500 {
        if radius - v.norm() <= RADIUS_TOL || hi - lo <= f64::EPSILON * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let candidate = solve(mid);
        if candidate.norm() > radius {
            lo = mid;
        } else {
            hi = mid;
            v = candidate;
        }
    }
    let lambda = hi;
    let residual = weighted_residual(target, features, measure, &v);
    Ok(LinearFit {
        v,
        residual,
        constrained: true,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn problem() -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let features = DMatrix::from_row_slice(
            5,
            3,
            &[
                0.5, 0.1, -0.2, 0.3, -0.6, 0.4, -0.1, 0.2, 0.9, 0.7, 0.7, 0.0, -0.4, 0.3, 0.5,
            ],
        );
        let target = DVector::from_vec(vec![1.0, -0.5, 0.8, 2.0, -1.2]);
        let measure = DVector::from_vec(vec![0.1, 0.3, 0.2, 0.25, 0.15]);
        (target, features, measure)
    }

    #[test]
    fn exact_target_inside_ball() {
        let (_, features, measure) = problem();
        let v0 = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let fit = best_linear_fit(&(&features * &v0), &features, &measure, 1.0).unwrap();
        assert!(fit.residual < 1e-12);
        assert!((fit.v - v0).norm() < 1e-10);
        assert!(!fit.constrained);
    }

    #[test]
    fn active_constraint_lands_on_sphere() {
        let (target, features, measure) = problem();
        let free = best_linear_fit(&target, &features, &measure, 1e6).unwrap();
        assert!(!free.constrained);
        let radius = 0.25 * free.v.norm();
        let fit = best_linear_fit(&target, &features, &measure, radius).unwrap();
        assert!(fit.constrained);
        assert!((fit.v.norm() - radius).abs() <= RADIUS_TOL);
        assert!(fit.residual >= free.residual);
    }

    #[test]
    fn zero_radius_and_zero_weights() {
        let (target, features, measure) = problem();
        let fit = best_linear_fit(&target, &features, &measure, 0.0).unwrap();
        assert_eq!(fit.v, DVector::zeros(3));
        let mut partial = measure.clone();
        partial[3] = 0.0;
        let fit = best_linear_fit(&target, &features, &partial, 50.0).unwrap();
        assert!(fit.residual.is_finite());
        assert!(best_linear_fit(&target, &features, &measure, -1.0).is_err());
    }

    #[test]
    fn wide_system_is_interpolated() {
        let features = DMatrix::from_fn(3, 40, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let target = DVector::from_vec(vec![0.2, -0.3, 0.5]);
        let measure = DVector::from_element(3, 1.0 / 3.0);
        let fit = best_linear_fit(&target, &features, &measure, 100.0).unwrap();
        assert!(fit.residual < 1e-10);
    }

    proptest! {
        #[test]
        fn residual_non_increasing_in_radius(r1 in 0.0..3.0_f64, r2 in 0.0..3.0_f64) {
            let (target, features, measure) = problem();
            let (small, large) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            let a = best_linear_fit(&target, &features, &measure, small).unwrap();
            let b = best_linear_fit(&target, &features, &measure, large).unwrap();
            prop_assert!(b.residual <= a.residual + 1e-9);
        }
    }
}
