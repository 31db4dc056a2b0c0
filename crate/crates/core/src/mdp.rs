//! Finite MDPs and their exact policy evaluation.
//!
//! Values follow the (1 − γ)-normalized convention: a constant reward `c`
//! yields `V ≡ c`, and every visitation measure is a probability
//! distribution. All quantities come from dense LU solves of the Bellman
//! and flow equations; there is no iteration and no sampling.
//!
//! State-action pairs are flattened row-major, `k = s * n_actions + a`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for probability normalization on inputs.
pub const INPUT_TOL: f64 = 1e-12;

/// A finite discounted MDP `(S, A, P, r, γ, ζ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `(S·A) × S`; row `s·A + a` is `P(· | s, a)`.
    transition: DMatrix<f64>,
    /// `S × A`.
    reward: DMatrix<f64>,
    discount: f64,
    init_dist: DVector<f64>,
}

/// JSON layout of an MDP. All arrays are row-major:
/// `reward[s][a]`, `transition[s][a][s']`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub init_dist: Vec<f64>,
    pub reward: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let (ns, na) = (doc.n_states, doc.n_actions);
        if doc.reward.len() != ns || doc.reward.iter().any(|row| row.len() != na) {
            return Err(Error::DimensionMismatch(format!(
                "reward must be {ns} x {na}"
            )));
        }
        if doc.transition.len() != ns
            || doc
                .transition
                .iter()
                .any(|row| row.len() != na || row.iter().any(|p| p.len() != ns))
        {
            return Err(Error::DimensionMismatch(format!(
                "transition must be {ns} x {na} x {ns}"
            )));
        }
        let reward = DMatrix::from_fn(ns, na, |s, a| doc.reward[s][a]);
        let transition =
            DMatrix::from_fn(ns * na, ns, |k, t| doc.transition[k / na][k % na][t]);
        TabularMdp::new(
            transition,
            reward,
            doc.discount,
            DVector::from_vec(doc.init_dist),
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        MdpDocument {
            n_states: ns,
            n_actions: na,
            discount: mdp.discount,
            init_dist: mdp.init_dist.iter().copied().collect(),
            reward: (0..ns)
                .map(|s| (0..na).map(|a| mdp.reward[(s, a)]).collect())
                .collect(),
            transition: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| (0..ns).map(|t| mdp.transition[(s * na + a, t)]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl TabularMdp {
    /// Builds and validates an MDP from a flattened `(S·A) × S` transition matrix.
    pub fn new(
        transition: DMatrix<f64>,
        reward: DMatrix<f64>,
        discount: f64,
        init_dist: DVector<f64>,
    ) -> Result<Self> {
        let ns = init_dist.len();
        let na = reward.ncols();
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("state and action sets must be non-empty".into()));
        }
        if reward.nrows() != ns {
            return Err(Error::DimensionMismatch(format!(
                "reward has {} rows, expected {ns}",
                reward.nrows()
            )));
        }
        if transition.nrows() != ns * na || transition.ncols() != ns {
            return Err(Error::DimensionMismatch(format!(
                "transition is {}x{}, expected {}x{ns}",
                transition.nrows(),
                transition.ncols(),
                ns * na
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {discount} not in (0, 1)")));
        }
        for k in 0..ns * na {
            let row = transition.row(k);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidMdp(format!(
                    "transition row (s={}, a={}) has a negative or non-finite entry",
                    k / na,
                    k % na
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > INPUT_TOL {
                return Err(Error::InvalidMdp(format!(
                    "transition row (s={}, a={}) sums to {total}",
                    k / na,
                    k % na
                )));
            }
        }
        if init_dist.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::InvalidMdp(
                "initial distribution must be strictly positive".into(),
            ));
        }
        let total: f64 = init_dist.iter().sum();
        if (total - 1.0).abs() > INPUT_TOL {
            return Err(Error::InvalidMdp(format!(
                "initial distribution sums to {total}"
            )));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("reward has a non-finite entry".into()));
        }
        Ok(Self {
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            discount,
            init_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self) -> &DMatrix<f64> {
        &self.reward
    }

    /// Flattened `(S·A) × S` transition matrix.
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn init_dist(&self) -> &DVector<f64> {
        &self.init_dist
    }

    /// `P(s' | s, a)`.
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a, next)]
    }

    /// Same MDP with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.reward.clone(),
            discount,
            self.init_dist.clone(),
        )
    }

    /// Same MDP with a different reward matrix.
    pub fn with_reward(&self, reward: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            reward,
            self.discount,
            self.init_dist.clone(),
        )
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// Checks `|r(s, a)| ≤ q_max` everywhere.
    pub fn check_reward_bound(&self, q_max: f64) -> Result<()> {
        let max = self.max_abs_reward();
        if max > q_max {
            return Err(Error::InvalidMdp(format!(
                "reward magnitude {max} exceeds declared bound {q_max}"
            )));
        }
        Ok(())
    }

    fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    /// `P_π(s, s') = Σ_a π(a|s) P(s'|s,a)`.
    pub fn policy_transition(&self, policy: &PolicyTable) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut out = DMatrix::zeros(ns, ns);
        for s in 0..ns {
            for a in 0..na {
                let p = policy.probs[(s, a)];
                for t in 0..ns {
                    out[(s, t)] += p * self.transition[(s * na + a, t)];
                }
            }
        }
        out
    }

    /// `r_π(s) = Σ_a π(a|s) r(s,a)`.
    pub fn policy_reward(&self, policy: &PolicyTable) -> DVector<f64> {
        DVector::from_fn(self.n_states, |s, _| {
            (0..self.n_actions)
                .map(|a| policy.probs[(s, a)] * self.reward[(s, a)])
                .sum()
        })
    }
}

/// Row-stochastic `S × A` matrix of action probabilities with full support.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    probs: DMatrix<f64>,
}

impl PolicyTable {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|p| !p.is_finite() || *p <= 0.0) {
                return Err(Error::InvalidPolicy(format!(
                    "row {s} has a non-positive or non-finite entry"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > INPUT_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {total}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    /// Constructor for rows produced by a softmax, which are normalized by construction.
    pub(crate) fn from_softmax(probs: DMatrix<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }
}

/// `V^π`, `Q^π` and `A^π = Q^π − V^π`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBundle {
    pub v: DVector<f64>,
    pub q: DMatrix<f64>,
    pub adv: DMatrix<f64>,
}

/// Discounted state and state-action visitation measures of one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Visitation {
    pub nu: DVector<f64>,
    /// `σ(s, a) = π(a|s)·ν(s)`, shape `S × A`.
    pub sigma: DMatrix<f64>,
}

/// Visitation measures including the ones re-initialized at every `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationBundle {
    pub nu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `(S·A) × (S·A)`: row `(s, a)` holds `σ^{(s,a)}(s', a')` over flattened `(s', a')`.
    pub sigma_init: DMatrix<f64>,
}

impl VisitationBundle {
    /// `σ^{(s,a)}` as an `S × A` matrix.
    pub fn sigma_init_at(&self, s: usize, a: usize) -> DMatrix<f64> {
        let na = self.sigma.ncols();
        let row = self.sigma_init.row(s * na + a);
        DMatrix::from_fn(self.sigma.nrows(), na, |t, b| row[t * na + b])
    }
}

/// Everything the meta-learning code needs about one `(MDP, policy)` pair.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub values: ValueBundle,
    pub nu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_init: Option<DMatrix<f64>>,
}

/// Flattens an `S × A` matrix into a vector indexed by `s·A + a`.
pub fn flatten_pairs(m: &DMatrix<f64>) -> DVector<f64> {
    let na = m.ncols();
    DVector::from_fn(m.nrows() * na, |k, _| m[(k / na, k % na)])
}

/// Inverse of [`flatten_pairs`].
pub fn unflatten_pairs(v: &DVector<f64>, n_states: usize, n_actions: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_states, n_actions, |s, a| v[s * n_actions + a])
}

/// Evaluates `policy` on `mdp`. The per-`(s, a)` re-initialized measures cost
/// one extra multi-right-hand-side solve and are only built on request.
pub fn evaluate_policy(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    with_init: bool,
) -> Result<PolicyEvaluation> {
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let gamma = mdp.discount;
    let p_pi = mdp.policy_transition(policy);
    let identity = DMatrix::<f64>::identity(ns, ns);

    let bellman = (&identity - &p_pi * gamma).lu();
    let v = bellman
        .solve(&(mdp.policy_reward(policy) * (1.0 - gamma)))
        .ok_or(Error::SingularSystem("Bellman equation"))?;
    let flat_reward = flatten_pairs(&mdp.reward);
    let q_flat = flat_reward * (1.0 - gamma) + (&mdp.transition * &v) * gamma;
    let q = unflatten_pairs(&q_flat, ns, na);
    let adv = DMatrix::from_fn(ns, na, |s, a| q[(s, a)] - v[s]);

    let flow = (&identity - p_pi.transpose() * gamma).lu();
    let nu = flow
        .solve(&(&mdp.init_dist * (1.0 - gamma)))
        .ok_or(Error::SingularSystem("state visitation"))?;
    let sigma = DMatrix::from_fn(ns, na, |s, a| policy.probs[(s, a)] * nu[s]);

    let sigma_init = if with_init {
        // Column (s, a) of `starts` is P(· | s, a).
        let starts = mdp.transition.transpose() * (1.0 - gamma);
        let nus = flow
            .solve(&starts)
            .ok_or(Error::SingularSystem("re-initialized visitation"))?;
        Some(DMatrix::from_fn(ns * na, ns * na, |k, j| {
            let (t, b) = (j / na, j % na);
            policy.probs[(t, b)] * nus[(t, k)]
        }))
    } else {
        None
    };

    Ok(PolicyEvaluation {
        values: ValueBundle { v, q, adv },
        nu,
        sigma,
        sigma_init,
    })
}

pub fn value_functions(mdp: &TabularMdp, policy: &PolicyTable) -> Result<ValueBundle> {
    Ok(evaluate_policy(mdp, policy, false)?.values)
}

/// `ν_π = (1 − γ) Σ_t γ^t P(s_t = ·)` with `s_0 ∼ ζ`, and `σ_π = π·ν_π`.
pub fn visitation(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Visitation> {
    let eval = evaluate_policy(mdp, policy, false)?;
    Ok(Visitation {
        nu: eval.nu,
        sigma: eval.sigma,
    })
}

/// State-action visitation of `policy` when the initial state is drawn from `P(· | s, a)`.
pub fn init_visitation(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    s: usize,
    a: usize,
) -> Result<DMatrix<f64>> {
    mdp.check_policy(policy)?;
    if s >= mdp.n_states || a >= mdp.n_actions {
        return Err(Error::DimensionMismatch(format!(
            "pair ({s}, {a}) outside {}x{}",
            mdp.n_states, mdp.n_actions
        )));
    }
    let gamma = mdp.discount;
    let ns = mdp.n_states;
    let p_pi = mdp.policy_transition(policy);
    let flow = (DMatrix::<f64>::identity(ns, ns) - p_pi.transpose() * gamma).lu();
    let start = mdp.transition.row(s * mdp.n_actions + a).transpose() * (1.0 - gamma);
    let nu = flow
        .solve(&start)
        .ok_or(Error::SingularSystem("re-initialized visitation"))?;
    Ok(DMatrix::from_fn(ns, mdp.n_actions, |t, b| {
        policy.probs[(t, b)] * nu[t]
    }))
}

pub fn visitation_bundle(mdp: &TabularMdp, policy: &PolicyTable) -> Result<VisitationBundle> {
    let eval = evaluate_policy(mdp, policy, true)?;
    Ok(VisitationBundle {
        nu: eval.nu,
        sigma: eval.sigma,
        sigma_init: eval.sigma_init.expect("requested"),
    })
}

/// `J(π) = E_{σ_π}[r]`.
pub fn expected_total_reward(mdp: &TabularMdp, policy: &PolicyTable) -> Result<f64> {
    let vis = visitation(mdp, policy)?;
    Ok(vis.sigma.component_mul(&mdp.reward).sum())
}

/// `J(π) = E_{s∼ζ}[V^π(s)]`, the other side of the same identity.
pub fn initial_value(mdp: &TabularMdp, policy: &PolicyTable) -> Result<f64> {
    let values = value_functions(mdp, policy)?;
    Ok(mdp.init_dist.dot(&values.v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> TabularMdp {
        // two states, two actions; action 0 stays, action 1 moves
        let transition = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let reward = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, -0.5]);
        TabularMdp::new(transition, reward, 0.9, DVector::from_vec(vec![0.5, 0.5])).unwrap()
    }

    #[test]
    fn single_pair_constant_reward() {
        let mdp = TabularMdp::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            0.9,
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let values = value_functions(&mdp, &PolicyTable::uniform(1, 1)).unwrap();
        assert!((values.v[0] - 0.5).abs() < 1e-15);
        assert!((values.q[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(values.adv[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mdp = chain();
        let bad_row = DMatrix::from_row_slice(4, 2, &[0.9, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(TabularMdp::new(bad_row, mdp.reward.clone(), 0.9, mdp.init_dist.clone()).is_err());
        let zero_start = DVector::from_vec(vec![1.0, 0.0]);
        assert!(TabularMdp::new(
            mdp.transition.clone(),
            mdp.reward.clone(),
            0.9,
            zero_start
        )
        .is_err());
        assert!(mdp.with_discount(1.0).is_err());
        assert!(mdp.with_discount(0.0).is_err());
        assert!(mdp.check_reward_bound(1.0).is_ok());
        assert!(mdp.check_reward_bound(0.9).is_err());
        let wrong = PolicyTable::uniform(3, 2);
        assert!(matches!(
            value_functions(&mdp, &wrong),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(init_visitation(&mdp, &PolicyTable::uniform(2, 2), 2, 0).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(PolicyTable::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).is_ok());
        assert!(PolicyTable::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).is_err());
        assert!(PolicyTable::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.6])).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = chain();
        let text = serde_json::to_string(&mdp).unwrap();
        let back: TabularMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(back.prob(1, 1, 0), 1.0);
        let bad = text.replace("\"discount\":0.9", "\"discount\":1.5");
        assert!(serde_json::from_str::<TabularMdp>(&bad).is_err());
    }

    #[test]
    fn bundle_layout_matches_single_pair_solve() {
        let mdp = chain();
        let policy = PolicyTable::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4])).unwrap();
        let bundle = visitation_bundle(&mdp, &policy).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let direct = init_visitation(&mdp, &policy, s, a).unwrap();
                assert!((direct - bundle.sigma_init_at(s, a)).abs().max() < 1e-14);
            }
        }
    }
}
