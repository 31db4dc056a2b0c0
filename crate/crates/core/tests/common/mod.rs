//! Independent oracles for integration tests: plain-loop truncated series
//! over raw MDP entries, with no linear solves.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use metalab::mdp::{PolicyTable, TabularMdp};

/// Number of series terms so that `γ^T` is below `1e-18`.
pub fn horizon(discount: f64) -> usize {
    ((1e-18_f64).ln() / discount.ln()).ceil() as usize + 1
}

/// `P_π(s, s')` and `r_π(s)` from raw entries.
fn policy_dynamics(mdp: &TabularMdp, policy: &PolicyTable) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut p = vec![vec![0.0; ns]; ns];
    let mut r = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let w = policy.prob(s, a);
            r[s] += w * mdp.reward()[(s, a)];
            for t in 0..ns {
                p[s][t] += w * mdp.prob(s, a, t);
            }
        }
    }
    (p, r)
}

/// `V(s) = (1−γ) Σ_{t<T} γ^t (P_π^t r_π)(s)`.
pub fn values_truncated(mdp: &TabularMdp, policy: &PolicyTable, terms: usize) -> Vec<f64> {
    let (p, r) = policy_dynamics(mdp, policy);
    let g = mdp.discount();
    let ns = r.len();
    let mut v = vec![0.0; ns];
    let mut current = r.clone();
    let mut weight = 1.0 - g;
    for _ in 0..terms {
        for s in 0..ns {
            v[s] += weight * current[s];
        }
        current = (0..ns).map(|s| (0..ns).map(|t| p[s][t] * current[t]).sum()).collect();
        weight *= g;
    }
    v
}

/// `Q(s,a) = (1−γ) r(s,a) + γ Σ_{s'} P(s'|s,a) V(s')`.
pub fn q_from_values(mdp: &TabularMdp, v: &[f64]) -> Vec<Vec<f64>> {
    let g = mdp.discount();
    (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    (1.0 - g) * mdp.reward()[(s, a)]
                        + g * (0..mdp.n_states()).map(|t| mdp.prob(s, a, t) * v[t]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// `ν = (1−γ) Σ_{t<T} γ^t ζᵀ P_π^t`.
pub fn state_visitation_truncated(mdp: &TabularMdp, policy: &PolicyTable, terms: usize) -> Vec<f64> {
    let (p, _) = policy_dynamics(mdp, policy);
    let g = mdp.discount();
    let ns = p.len();
    let mut nu = vec![0.0; ns];
    let mut current: Vec<f64> = mdp.init_dist().iter().copied().collect();
    let mut weight = 1.0 - g;
    for _ in 0..terms {
        for s in 0..ns {
            nu[s] += weight * current[s];
        }
        current = (0..ns).map(|t| (0..ns).map(|s| current[s] * p[s][t]).sum()).collect();
        weight *= g;
    }
    nu
}

/// `J = (1−γ) Σ_t γ^t E[r_t]` by explicit matrix powers of the joint chain.
pub fn expected_reward_matrix_powers(mdp: &TabularMdp, policy: &PolicyTable, terms: usize) -> f64 {
    let (p, r) = policy_dynamics(mdp, policy);
    let ns = r.len();
    let g = mdp.discount();
    let mut power = DMatrix::<f64>::identity(ns, ns);
    let pm = DMatrix::from_fn(ns, ns, |s, t| p[s][t]);
    let zeta = mdp.init_dist();
    let rv = DVector::from_vec(r);
    let mut total = 0.0;
    let mut weight = 1.0 - g;
    for _ in 0..terms {
        total += weight * zeta.dot(&(&power * &rv));
        power = &power * &pm;
        weight *= g;
    }
    total
}

/// Policy with Gaussian logits of the given scale.
pub fn random_policy(n_states: usize, n_actions: usize, scale: f64, seed: u64) -> PolicyTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = DMatrix::zeros(n_states, n_actions);
    for s in 0..n_states {
        let logits: Vec<f64> = (0..n_actions)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for a in 0..n_actions {
            probs[(s, a)] = exps[a] / total;
        }
    }
    PolicyTable::new(probs).unwrap()
}

pub fn gaussian_vector(len: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
