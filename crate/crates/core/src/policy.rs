//! Energy-based softmax policies and the KL-proximal adaptation step.
//!
//! An energy model maps parameters to one score per state-action pair. The
//! main-effect policy is `softmax(energy / τ)`; a subtask adapts it with
//! `softmax(energy / τ + η·Q)`, the closed-form maximizer of the
//! KL-regularized improvement objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{flatten_pairs, unflatten_pairs, PolicyTable};

/// Slack allowed on `‖φ(s, a)‖₂ ≤ 1`.
const NORM_SLACK: f64 = 1e-12;

/// Parameterized energy over flattened state-action pairs.
pub trait EnergyModel: Sync {
    fn n_params(&self) -> usize;
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Energy at every pair, indexed `s·A + a`.
    fn energy(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;
    /// `(S·A) × n_params` Jacobian of [`EnergyModel::energy`].
    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// Precomputed features `φ(s, a) ∈ R^d`, one row per flattened pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureMapDocument", into = "FeatureMapDocument")]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    table: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapDocument {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row `s·A + a` holds `φ(s, a)`.
    pub rows: Vec<Vec<f64>>,
}

impl TryFrom<FeatureMapDocument> for FeatureMap {
    type Error = Error;

    fn try_from(doc: FeatureMapDocument) -> Result<Self> {
        let dim = doc.rows.first().map_or(0, Vec::len);
        if doc.rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidFeatures("ragged feature rows".into()));
        }
        let table = DMatrix::from_fn(doc.rows.len(), dim, |k, j| doc.rows[k][j]);
        FeatureMap::new(doc.n_states, doc.n_actions, table)
    }
}

impl From<FeatureMap> for FeatureMapDocument {
    fn from(f: FeatureMap) -> Self {
        FeatureMapDocument {
            n_states: f.n_states,
            n_actions: f.n_actions,
            rows: f
                .table
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

impl FeatureMap {
    pub fn new(n_states: usize, n_actions: usize, table: DMatrix<f64>) -> Result<Self> {
        if table.nrows() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "feature table has {} rows, expected {}",
                table.nrows(),
                n_states * n_actions
            )));
        }
        if table.ncols() == 0 {
            return Err(Error::InvalidFeatures("feature dimension must be positive".into()));
        }
        for (k, row) in table.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidFeatures(format!("row {k} is not finite")));
            }
            if row.norm() > 1.0 + NORM_SLACK {
                return Err(Error::InvalidFeatures(format!(
                    "feature norm {} at pair (s={}, a={}) exceeds 1",
                    row.norm(),
                    k / n_actions,
                    k % n_actions
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn row(&self, s: usize, a: usize) -> DVector<f64> {
        self.table.row(s * self.n_actions + a).transpose()
    }
}

impl EnergyModel for FeatureMap {
    fn n_params(&self) -> usize {
        self.dim()
    }

    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn energy(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, features have dim {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(&self.table * theta)
    }

    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, features have dim {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(self.table.clone())
    }
}

/// `θ` together with the temperature `τ` of the energy-based policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyPolicyParams {
    pub theta: DVector<f64>,
    pub temperature: f64,
}

impl EnergyPolicyParams {
    pub fn new(theta: DVector<f64>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        Ok(Self { theta, temperature })
    }

    /// `π_θ` under `model`.
    pub fn policy<M: EnergyModel + ?Sized>(&self, model: &M) -> Result<PolicyTable> {
        let energy = model.energy(&self.theta)?;
        softmax_policy(
            &unflatten_pairs(&energy, model.n_states(), model.n_actions()),
            self.temperature,
        )
    }
}

/// Result of the adaptation step: the policy and its pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedPolicy {
    pub probs: PolicyTable,
    /// `energy / τ + η·Q`.
    pub logits: DMatrix<f64>,
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    Ok(())
}

/// Row-wise softmax of raw scores with max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>) -> Result<PolicyTable> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut probs = logits.clone();
    for mut row in probs.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    Ok(PolicyTable::from_softmax(probs))
}

/// `π(a|s) = exp(E(s,a)/τ) / Σ_{a'} exp(E(s,a')/τ)`.
pub fn softmax_policy(energy: &DMatrix<f64>, temperature: f64) -> Result<PolicyTable> {
    check_temperature(temperature)?;
    softmax_rows(&(energy / temperature))
}

/// Closed-form maximizer of the KL-proximal objective:
/// `π_i(·|s) ∝ exp(E(s,·)/τ + η·Q(s,·))`.
pub fn ppo_inner_step(
    energy: &DMatrix<f64>,
    q: &DMatrix<f64>,
    eta: f64,
    temperature: f64,
) -> Result<AdaptedPolicy> {
    check_temperature(temperature)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta {eta} must be finite and ≥ 0")));
    }
    if energy.shape() != q.shape() {
        return Err(Error::DimensionMismatch(format!(
            "energy is {:?}, Q is {:?}",
            energy.shape(),
            q.shape()
        )));
    }
    let logits = energy / temperature + q * eta;
    let probs = softmax_rows(&logits)?;
    Ok(AdaptedPolicy { probs, logits })
}

/// `Σ_s ν(s)·[⟨Q(s,·), π(·|s)⟩ − (1/η)·KL(π(·|s) ‖ π_θ(·|s))]`.
pub fn ppo_objective(
    candidate: &PolicyTable,
    main_effect: &PolicyTable,
    q: &DMatrix<f64>,
    eta: f64,
    nu: &DVector<f64>,
) -> Result<f64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta {eta} must be positive")));
    }
    let shape = candidate.probs().shape();
    if main_effect.probs().shape() != shape || q.shape() != shape || nu.len() != shape.0 {
        return Err(Error::DimensionMismatch(
            "candidate, main effect, Q and ν disagree in shape".into(),
        ));
    }
    let mut total = 0.0;
    for s in 0..shape.0 {
        let mut inner = 0.0;
        let mut kl = 0.0;
        for a in 0..shape.1 {
            let p = candidate.prob(s, a);
            let base = main_effect.prob(s, a);
            if p <= 0.0 || base <= 0.0 {
                return Err(Error::InfiniteKl { state: s, action: a });
            }
            inner += q[(s, a)] * p;
            kl += p * (p / base).ln();
        }
        total += nu[s] * (inner - kl / eta);
    }
    Ok(total)
}

/// Vanilla policy gradient `(1−γ)^{-1}·E_σ[∇ log π_θ · A]` of `J` for one MDP.
pub fn policy_gradient<M: EnergyModel + ?Sized>(
    mdp: &crate::mdp::TabularMdp,
    model: &M,
    params: &EnergyPolicyParams,
) -> Result<DVector<f64>> {
    let policy = params.policy(model)?;
    let eval = crate::mdp::evaluate_policy(mdp, &policy, false)?;
    let weights = flatten_pairs(&eval.sigma.component_mul(&eval.values.adv));
    let jac = model.jacobian(&params.theta)?;
    Ok(jac.transpose() * weights / (params.temperature * (1.0 - mdp.discount())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{expected_total_reward, TabularMdp};
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let uniform = softmax_policy(&DMatrix::zeros(3, 4), 0.7).unwrap();
        assert!(uniform.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = softmax_policy(&DMatrix::from_row_slice(1, 2, &[0.0, 3.0_f64.ln()]), 1.0).unwrap();
        assert!((p.prob(0, 0) - 0.25).abs() < 1e-15);
        assert!((p.prob(0, 1) - 0.75).abs() < 1e-15);
        assert!(matches!(
            softmax_policy(&DMatrix::zeros(1, 2), 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn zero_eta_returns_main_effect() {
        let energy = DMatrix::from_row_slice(2, 3, &[0.1, -0.4, 0.9, 1.2, 0.0, -0.3]);
        let q = DMatrix::from_row_slice(2, 3, &[0.5, 0.2, -0.1, 0.0, 0.3, 0.9]);
        let adapted = ppo_inner_step(&energy, &q, 0.0, 0.8).unwrap();
        assert_eq!(adapted.probs, softmax_policy(&energy, 0.8).unwrap());
    }

    #[test]
    fn zero_probability_is_infinite_kl() {
        let zero = PolicyTable::from_softmax(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let half = PolicyTable::uniform(1, 2);
        let q = DMatrix::zeros(1, 2);
        let nu = DVector::from_element(1, 1.0);
        assert!(matches!(
            ppo_objective(&zero, &half, &q, 0.1, &nu),
            Err(Error::InfiniteKl { state: 0, action: 1 })
        ));
        assert!(ppo_objective(&half, &zero, &q, 0.1, &nu).is_err());
    }

    #[test]
    fn feature_norm_enforced() {
        let too_long = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.5]);
        assert!(matches!(
            FeatureMap::new(1, 2, too_long),
            Err(Error::InvalidFeatures(_))
        ));
        let map = FeatureMap::new(1, 2, DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 0.0, 0.5])).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        assert_eq!(serde_json::from_str::<FeatureMap>(&text).unwrap(), map);
        assert!(map
            .energy(&DVector::zeros(3))
            .is_err());
    }

    #[test]
    fn vanilla_gradient_matches_finite_differences() {
        let transition = DMatrix::from_row_slice(
            4,
            2,
            &[0.7, 0.3, 0.2, 0.8, 0.4, 0.6, 0.9, 0.1],
        );
        let reward = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.8, 0.1]);
        let mdp = TabularMdp::new(transition, reward, 0.85, DVector::from_vec(vec![0.4, 0.6])).unwrap();
        let features = FeatureMap::new(
            2,
            2,
            DMatrix::from_row_slice(4, 2, &[0.5, 0.1, -0.3, 0.6, 0.2, -0.7, 0.0, 0.4]),
        )
        .unwrap();
        let theta = DVector::from_vec(vec![0.3, -0.8]);
        let params = EnergyPolicyParams::new(theta.clone(), 0.7).unwrap();
        let analytic = policy_gradient(&mdp, &features, &params).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut up = theta.clone();
            up[j] += h;
            let mut down = theta.clone();
            down[j] -= h;
            let j_up = expected_total_reward(
                &mdp,
                &EnergyPolicyParams::new(up, 0.7).unwrap().policy(&features).unwrap(),
            )
            .unwrap();
            let j_down = expected_total_reward(
                &mdp,
                &EnergyPolicyParams::new(down, 0.7).unwrap().policy(&features).unwrap(),
            )
            .unwrap();
            let fd = (j_up - j_down) / (2.0 * h);
            assert!((fd - analytic[j]).abs() <= 1e-5 * analytic.norm().max(1e-3));
        }
    }

    #[test]
    fn closed_form_maximizes_weighted_objective() {
        let energy = DMatrix::from_row_slice(2, 3, &[0.1, -0.4, 0.9, 1.2, 0.0, -0.3]);
        let q = DMatrix::from_row_slice(2, 3, &[0.5, 0.2, -0.1, 0.0, 0.3, 0.9]);
        let (eta, tau) = (0.7, 1.0);
        let main = softmax_policy(&energy, tau).unwrap();
        let best = ppo_inner_step(&energy, &q, eta, tau).unwrap().probs;
        for nu in [[0.5, 0.5], [0.9, 0.1], [0.05, 0.95]] {
            let nu = DVector::from_row_slice(&nu);
            let top = ppo_objective(&best, &main, &q, eta, &nu).unwrap();
            for k in 0..20 {
                let t = 0.05 * (k as f64 + 1.0);
                let bent = DMatrix::from_fn(2, 3, |s, a| {
                    best.prob(s, a).ln() + t * ((s * 3 + a) as f64 * 1.3).sin()
                });
                let other = softmax_rows(&bent).unwrap();
                assert!(ppo_objective(&other, &main, &q, eta, &nu).unwrap() < top);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            values in proptest::collection::vec(-5.0..5.0_f64, 12),
            shifts in proptest::collection::vec(-50.0..50.0_f64, 4),
            tau in 0.1..3.0_f64,
        ) {
            let energy = DMatrix::from_row_slice(4, 3, &values);
            let shifted = DMatrix::from_fn(4, 3, |s, a| energy[(s, a)] + shifts[s]);
            let p = softmax_policy(&energy, tau).unwrap();
            let q = softmax_policy(&shifted, tau).unwrap();
            prop_assert!((p.probs() - q.probs()).abs().max() < 1e-12);
            for s in 0..4 {
                prop_assert!((p.probs().row(s).sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_q_leaves_policy_unchanged(
            values in proptest::collection::vec(-3.0..3.0_f64, 6),
            levels in proptest::collection::vec(-1.0..1.0_f64, 2),
            eta in 0.0..2.0_f64,
        ) {
            let energy = DMatrix::from_row_slice(2, 3, &values);
            let q = DMatrix::from_fn(2, 3, |s, _| levels[s]);
            let adapted = ppo_inner_step(&energy, &q, eta, 1.0).unwrap();
            let main = softmax_policy(&energy, 1.0).unwrap();
            prop_assert!((adapted.probs.probs() - main.probs()).abs().max() < 1e-12);
        }
    }
}
