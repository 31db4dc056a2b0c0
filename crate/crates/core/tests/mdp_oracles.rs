//! Exact policy evaluation against truncated-series and matrix-power oracles.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metalab::mdp::{
    expected_total_reward, init_visitation, initial_value, value_functions, visitation, visitation_bundle,
    TabularMdp,
};

use common::{
    expected_reward_matrix_powers, max_abs_diff, q_from_values, random_policy, state_visitation_truncated,
    values_truncated,
};

/// Uniform-random rows, rewards in `[−1, 1]` and a positive start distribution.
fn random_mdp(ns: usize, na: usize, discount: f64, seed: u64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = DMatrix::zeros(ns * na, ns);
    for k in 0..ns * na {
        let row: Vec<f64> = (0..ns).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = row.iter().sum();
        for t in 0..ns {
            transition[(k, t)] = row[t] / total;
        }
    }
    let reward = DMatrix::from_fn(ns, na, |_, _| rng.random_range(-1.0..1.0));
    let init: Vec<f64> = (0..ns).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = init.iter().sum();
    TabularMdp::new(
        transition,
        reward,
        discount,
        DVector::from_iterator(ns, init.iter().map(|v| v / total)),
    )
    .unwrap()
}

#[test]
fn values_match_truncated_sum_at_half_discount() {
    for seed in 0..10 {
        let mdp = random_mdp(4, 3, 0.5, seed);
        let pi = random_policy(4, 3, 1.0, 100 + seed);
        let exact = value_functions(&mdp, &pi).unwrap();
        let oracle = values_truncated(&mdp, &pi, 201);
        assert!(max_abs_diff(exact.v.as_slice(), &oracle) <= 1e-10);
        let q = q_from_values(&mdp, &oracle);
        for s in 0..4 {
            for a in 0..3 {
                assert!((exact.q[(s, a)] - q[s][a]).abs() <= 1e-10);
                assert!((exact.adv[(s, a)] - (q[s][a] - oracle[s])).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn visitation_matches_truncated_sum() {
    for seed in 0..10 {
        let mdp = random_mdp(5, 3, 0.8, 20 + seed);
        let pi = random_policy(5, 3, 1.0, 200 + seed);
        let exact = visitation(&mdp, &pi).unwrap();
        let oracle = state_visitation_truncated(&mdp, &pi, 301);
        assert!(max_abs_diff(exact.nu.as_slice(), &oracle) <= 1e-10);
        assert!((exact.nu.sum() - 1.0).abs() <= 1e-12);
        for s in 0..5 {
            assert!((exact.sigma.row(s).sum() - exact.nu[s]).abs() <= 1e-14);
            for a in 0..3 {
                assert!((exact.sigma[(s, a)] - oracle[s] * pi.prob(s, a)).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn init_visitation_matches_restarted_series() {
    let mdp = random_mdp(4, 3, 0.85, 7);
    let pi = random_policy(4, 3, 1.0, 8);
    let bundle = visitation_bundle(&mdp, &pi).unwrap();
    for s in 0..4 {
        for a in 0..3 {
            let start = DVector::from_fn(4, |t, _| mdp.prob(s, a, t));
            let restarted = TabularMdp::new(
                mdp.transition().clone(),
                mdp.reward().clone(),
                mdp.discount(),
                start,
            )
            .unwrap();
            let nu = state_visitation_truncated(&restarted, &pi, 400);
            let sigma = init_visitation(&mdp, &pi, s, a).unwrap();
            assert_eq!(sigma, bundle.sigma_init_at(s, a));
            assert!((sigma.sum() - 1.0).abs() <= 1e-12);
            for t in 0..4 {
                assert!((sigma.row(t).sum() - nu[t]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn total_reward_matches_matrix_powers() {
    for seed in 0..10 {
        let mdp = random_mdp(5, 3, 0.9, 40 + seed);
        let pi = random_policy(5, 3, 2.0, 400 + seed);
        let oracle = expected_reward_matrix_powers(&mdp, &pi, 450);
        assert!((expected_total_reward(&mdp, &pi).unwrap() - oracle).abs() <= 1e-10);
        assert!((initial_value(&mdp, &pi).unwrap() - oracle).abs() <= 1e-10);
    }
}

#[test]
fn constant_reward_gives_constant_return() {
    let base = random_mdp(5, 3, 0.7, 3);
    let mdp = base.with_reward(DMatrix::from_element(5, 3, 0.37)).unwrap();
    let pi = random_policy(5, 3, 1.0, 4);
    assert!((expected_total_reward(&mdp, &pi).unwrap() - 0.37).abs() <= 1e-14);
    let values = value_functions(&mdp, &pi).unwrap();
    assert!(values.adv.iter().all(|a| a.abs() <= 1e-14));
}
