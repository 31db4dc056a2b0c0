//! Two-layer ReLU network: initialization statistics, feature map against
//! directional finite differences, and the origin.

mod common;

use metalab::neural::init_symmetric;

use common::gaussian_vector;

#[test]
fn initialization_has_variance_one_over_d() {
    let (m, d) = (20_000, 5);
    let net = init_symmetric(m, d, 17).unwrap();
    let w = net.w_init();
    let half = m / 2;
    for j in 0..d {
        let column: Vec<f64> = (0..half).map(|r| w[r * d + j]).collect();
        let mean = column.iter().sum::<f64>() / half as f64;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (half - 1) as f64;
        assert!((var * d as f64 - 1.0).abs() <= 0.1, "coordinate {j}: variance {var}");
    }
    for r in 0..half {
        for j in 0..d {
            assert_eq!(w[r * d + j], w[(r + half) * d + j]);
        }
    }
    let x = gaussian_vector(d, 1.0, 3);
    assert_eq!(net.forward(x.as_slice()), 0.0);
}

#[test]
fn feature_is_the_directional_derivative() {
    let (m, d) = (32, 4);
    let base = init_symmetric(m, d, 23).unwrap();
    let step = 1e-6;
    for trial in 0..10u64 {
        let w = base.w_init() + gaussian_vector(m * d, 0.2, 100 + trial);
        let x = gaussian_vector(d, 0.5, 200 + trial);
        let dir = gaussian_vector(m * d, 1.0, 300 + trial);
        let margin = (0..m)
            .map(|r| (0..d).map(|j| w[r * d + j] * x[j]).sum::<f64>().abs())
            .fold(f64::INFINITY, f64::min);
        let dir_scale = (0..m)
            .map(|r| (0..d).map(|j| dir[r * d + j] * x[j]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        if margin <= 2.0 * step * dir_scale {
            continue;
        }
        let plus = base.forward_with(&(&w + &dir * step), x.as_slice());
        let minus = base.forward_with(&(&w - &dir * step), x.as_slice());
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = base.feature_with(&w, x.as_slice()).dot(&dir);
        assert!((numeric - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()));
        let value = base.forward_with(&w, x.as_slice());
        assert!((value - base.feature_with(&w, x.as_slice()).dot(&w)).abs() <= 1e-12);
    }
}

#[test]
fn origin_gives_zero_output_and_feature() {
    let net = init_symmetric(16, 3, 5).unwrap();
    let w = net.w_init() + gaussian_vector(48, 1.0, 6);
    let origin = [0.0; 3];
    assert_eq!(net.forward_with(&w, &origin), 0.0);
    assert!(net.feature_with(&w, &origin).iter().all(|v| *v == 0.0));
}
