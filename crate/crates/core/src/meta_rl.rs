//! Meta-RL over a finite set of MDP subtasks.
//!
//! The meta-objective averages each subtask's return after one KL-proximal
//! adaptation of the shared main-effect policy. Its gradient is available in
//! two algebraically equal forms: a direct one built from the auxiliary
//! function `h_i`, and a refined one that reweights by the meta-visitation
//! measure `ς_i`. Both carry the `(1 − γ_i)^{-1}` factors required by the
//! normalized value convention.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{evaluate_policy, flatten_pairs, unflatten_pairs, PolicyEvaluation, PolicyTable, TabularMdp};
use crate::policy::{check_temperature, ppo_inner_step, softmax_policy, AdaptedPolicy, EnergyModel, FeatureMap};
use crate::train::{run_first_order, Direction, StepSchedule, TrainState};

/// Outer-loop trajectory of meta-RL.
pub type MetaRlState = TrainState;

/// `n` MDPs sharing state and action spaces, plus the shared feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetaRlTaskSetDocument", into = "MetaRlTaskSetDocument")]
pub struct MetaRlTaskSet {
    tasks: Vec<TabularMdp>,
    features: FeatureMap,
    temperature: f64,
    eta: f64,
    q_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaRlTaskSetDocument {
    pub tasks: Vec<TabularMdp>,
    pub features: FeatureMap,
    pub temperature: f64,
    pub eta: f64,
    pub q_max: f64,
}

impl TryFrom<MetaRlTaskSetDocument> for MetaRlTaskSet {
    type Error = Error;

    fn try_from(doc: MetaRlTaskSetDocument) -> Result<Self> {
        MetaRlTaskSet::new(doc.tasks, doc.features, doc.temperature, doc.eta, doc.q_max)
    }
}

impl From<MetaRlTaskSet> for MetaRlTaskSetDocument {
    fn from(set: MetaRlTaskSet) -> Self {
        MetaRlTaskSetDocument {
            tasks: set.tasks,
            features: set.features,
            temperature: set.temperature,
            eta: set.eta,
            q_max: set.q_max,
        }
    }
}

impl MetaRlTaskSet {
    pub fn new(
        tasks: Vec<TabularMdp>,
        features: FeatureMap,
        temperature: f64,
        eta: f64,
        q_max: f64,
    ) -> Result<Self> {
        check_temperature(temperature)?;
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidTaskSet(format!("eta {eta} must be finite and ≥ 0")));
        }
        if !(q_max > 0.0 && q_max.is_finite()) {
            return Err(Error::InvalidTaskSet(format!("q_max {q_max} must be positive")));
        }
        let first = tasks
            .first()
            .ok_or_else(|| Error::InvalidTaskSet("task set is empty".into()))?;
        let (ns, na) = (first.n_states(), first.n_actions());
        for (i, task) in tasks.iter().enumerate() {
            if task.n_states() != ns || task.n_actions() != na {
                return Err(Error::InvalidTaskSet(format!(
                    "task {i} is {}x{}, task 0 is {ns}x{na}",
                    task.n_states(),
                    task.n_actions()
                )));
            }
            task.check_reward_bound(q_max)?;
        }
        if features.n_states() != ns || features.n_actions() != na {
            return Err(Error::InvalidTaskSet(
                "feature map does not match the tasks' state-action space".into(),
            ));
        }
        Ok(Self {
            tasks,
            features,
            temperature,
            eta,
            q_max,
        })
    }

    pub fn tasks(&self) -> &[TabularMdp] {
        &self.tasks
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Copy with a different adaptation step size.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::new(self.tasks.clone(), self.features.clone(), self.temperature, eta, self.q_max)
    }

    /// Copy with different features, same tasks.
    pub fn with_features(&self, features: FeatureMap) -> Result<Self> {
        Self::new(self.tasks.clone(), features, self.temperature, self.eta, self.q_max)
    }

    /// The linear-energy problem over this task set.
    pub fn problem(&self) -> MetaRlProblem<'_, FeatureMap> {
        self.problem_with(&self.features)
    }

    /// The same tasks under another energy model.
    pub fn problem_with<'a, M: EnergyModel + ?Sized>(&'a self, model: &'a M) -> MetaRlProblem<'a, M> {
        MetaRlProblem {
            tasks: &self.tasks,
            model,
            temperature: self.temperature,
            eta: self.eta,
        }
    }
}

/// Everything computed for one subtask at one `θ`.
#[derive(Debug, Clone)]
pub struct TaskTerms {
    pub main: PolicyTable,
    pub adapted: AdaptedPolicy,
    /// Evaluation of `π_θ` on this task; `sigma_init` is present when requested.
    pub main_eval: PolicyEvaluation,
    /// Evaluation of the adapted policy `π_{i,θ}`.
    pub adapted_eval: PolicyEvaluation,
    /// `J_i(π_{i,θ})`.
    pub objective: f64,
    pub discount: f64,
}

/// All subtasks evaluated at one `θ`.
#[derive(Debug, Clone)]
pub struct MetaEvaluation {
    pub energy: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub tasks: Vec<TaskTerms>,
}

impl MetaEvaluation {
    pub fn objective(&self) -> f64 {
        self.tasks.iter().map(|t| t.objective).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Per-task quantities of the refined gradient form, all flattened over pairs.
#[derive(Debug, Clone)]
pub struct RefinedTerms {
    /// `ς_i(s', a') = Σ_{(s,a)} σ_{π_{i,θ}}(s,a)·σ^{(s,a)}_{π_θ}(s',a')`.
    pub varsigma: DVector<f64>,
    /// `G_i = E_ρ[A_i^{π_{i,θ}}(s,a) | (s',a')]`.
    pub cond_adv: DVector<f64>,
    /// `g_i` such that the task's gradient is `Jacᵀ(ς_i ∘ g_i)`.
    pub g: DVector<f64>,
}

/// The meta-RL problem for a given energy model.
#[derive(Clone, Copy)]
pub struct MetaRlProblem<'a, M: EnergyModel + ?Sized> {
    pub tasks: &'a [TabularMdp],
    pub model: &'a M,
    pub temperature: f64,
    pub eta: f64,
}

impl<'a, M: EnergyModel + ?Sized> MetaRlProblem<'a, M> {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Main-effect policy `π_θ`.
    pub fn main_policy(&self, theta: &DVector<f64>) -> Result<PolicyTable> {
        let energy = self.model.energy(theta)?;
        softmax_policy(
            &unflatten_pairs(&energy, self.model.n_states(), self.model.n_actions()),
            self.temperature,
        )
    }

    /// Evaluates every subtask at `theta`. `with_gradient_data` adds the
    /// Jacobian and the re-initialized visitation measures of `π_θ`.
    pub fn evaluate(&self, theta: &DVector<f64>, with_gradient_data: bool) -> Result<MetaEvaluation> {
        let (ns, na) = (self.model.n_states(), self.model.n_actions());
        let energy = self.model.energy(theta)?;
        let energy_matrix = unflatten_pairs(&energy, ns, na);
        let main = softmax_policy(&energy_matrix, self.temperature)?;
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for mdp in self.tasks {
            let main_eval = evaluate_policy(mdp, &main, with_gradient_data)?;
            let adapted = ppo_inner_step(&energy_matrix, &main_eval.values.q, self.eta, self.temperature)?;
            let adapted_eval = evaluate_policy(mdp, &adapted.probs, false)?;
            let objective = adapted_eval.sigma.component_mul(mdp.reward()).sum();
            tasks.push(TaskTerms {
                main: main.clone(),
                adapted,
                main_eval,
                adapted_eval,
                objective,
                discount: mdp.discount(),
            });
        }
        let jacobian = if with_gradient_data {
            Some(self.model.jacobian(theta)?)
        } else {
            None
        };
        Ok(MetaEvaluation {
            energy,
            jacobian,
            tasks,
        })
    }

    /// `L(θ) = (1/n) Σ_i J_i(π_{i,θ})`.
    pub fn objective(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(theta, false)?.objective())
    }

    /// Direct form: `(1/n) Σ_i (1−γ_i)^{-1} E_{σ_{π_{i,θ}}}[h_i · A_i^{π_{i,θ}}]` with
    /// `h_i(s,a) = ∇E(s,a)/τ + η γ_i / ((1−γ_i) τ) · E_{σ^{(s,a)}_{π_θ}}[∇E · A_i^{π_θ}]`.
    pub fn gradient_direct(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let eval = self.evaluate(theta, true)?;
        Ok(self.direct_from(&eval))
    }

    /// Refined form: `(1/n) Σ_i Jacᵀ(ς_i ∘ g_i)`.
    pub fn gradient_refined(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let eval = self.evaluate(theta, true)?;
        self.refined_from(&eval)
    }

    /// Objective and direct gradient from a single evaluation.
    pub fn objective_and_gradient(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let eval = self.evaluate(theta, true)?;
        Ok((eval.objective(), self.direct_from(&eval)))
    }

    /// Auxiliary function `h_i`, one row per flattened pair.
    pub fn auxiliary(&self, terms: &TaskTerms, jacobian: &DMatrix<f64>) -> DMatrix<f64> {
        let gamma = terms.discount;
        let scale = self.eta * gamma / ((1.0 - gamma) * self.temperature);
        let adv_main = flatten_pairs(&terms.main_eval.values.adv);
        let sigma_init = terms
            .main_eval
            .sigma_init
            .as_ref()
            .expect("gradient data requested");
        let mut weighted = jacobian.clone();
        for (k, mut row) in weighted.row_iter_mut().enumerate() {
            row *= adv_main[k];
        }
        jacobian / self.temperature + (sigma_init * weighted) * scale
    }

    fn direct_from(&self, eval: &MetaEvaluation) -> DVector<f64> {
        let jacobian = eval.jacobian.as_ref().expect("gradient data requested");
        let mut total = DVector::zeros(jacobian.ncols());
        for terms in &eval.tasks {
            let h = self.auxiliary(terms, jacobian);
            let weights = flatten_pairs(
                &terms
                    .adapted_eval
                    .sigma
                    .component_mul(&terms.adapted_eval.values.adv),
            );
            total += h.transpose() * weights / (1.0 - terms.discount);
        }
        total / eval.tasks.len() as f64
    }

    /// Refined-form quantities of one task.
    pub fn refined_terms(&self, terms: &TaskTerms) -> Result<RefinedTerms> {
        let gamma = terms.discount;
        let na = self.model.n_actions();
        let sigma_init = terms
            .main_eval
            .sigma_init
            .as_ref()
            .expect("gradient data requested");
        let sigma = flatten_pairs(&terms.adapted_eval.sigma);
        let adv = flatten_pairs(&terms.adapted_eval.values.adv);
        let adv_main = flatten_pairs(&terms.main_eval.values.adv);
        let varsigma = sigma_init.tr_mul(&sigma);
        if let Some(k) = varsigma.iter().position(|v| *v <= 0.0) {
            return Err(Error::ZeroMass {
                measure: "meta-visitation",
                state: k / na,
                action: k % na,
            });
        }
        let cond_adv = sigma_init
            .tr_mul(&sigma.component_mul(&adv))
            .component_div(&varsigma);
        let scale = self.eta * gamma / ((1.0 - gamma) * self.temperature);
        let g = (adv.component_mul(&sigma).component_div(&varsigma) / self.temperature
            + cond_adv.component_mul(&adv_main) * scale)
            / (1.0 - gamma);
        Ok(RefinedTerms {
            varsigma,
            cond_adv,
            g,
        })
    }

    fn refined_from(&self, eval: &MetaEvaluation) -> Result<DVector<f64>> {
        let jacobian = eval.jacobian.as_ref().expect("gradient data requested");
        let mut total = DVector::zeros(jacobian.ncols());
        for terms in &eval.tasks {
            let refined = self.refined_terms(terms)?;
            total += jacobian.tr_mul(&refined.varsigma.component_mul(&refined.g));
        }
        Ok(total / eval.tasks.len() as f64)
    }
}

/// `L(θ)` for the linear-energy problem.
pub fn meta_objective(set: &MetaRlTaskSet, theta: &DVector<f64>) -> Result<f64> {
    set.problem().objective(theta)
}

pub fn meta_gradient_direct(set: &MetaRlTaskSet, theta: &DVector<f64>) -> Result<DVector<f64>> {
    set.problem().gradient_direct(theta)
}

pub fn meta_gradient_refined(set: &MetaRlTaskSet, theta: &DVector<f64>) -> Result<DVector<f64>> {
    set.problem().gradient_refined(theta)
}

/// Gradient ascent `θ_{ℓ+1} = θ_ℓ + α_ℓ ∇L(θ_ℓ)` with the direct gradient.
pub fn run_meta_rl<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    theta0: DVector<f64>,
    schedule: StepSchedule,
    iterations: usize,
) -> Result<MetaRlState> {
    run_first_order(
        |theta| problem.objective_and_gradient(theta),
        theta0,
        schedule,
        iterations,
        Direction::Ascent,
    )
}
