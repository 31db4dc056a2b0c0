//! Meta-supervised learning on finite domains with the squared loss.
//!
//! Every task shares the domain and its marginal `ρ` and has its own
//! finite conditional label distribution. Each task adapts the shared
//! parameter with one exact gradient step on its risk; the meta-objective
//! averages the post-adaptation risks and is minimized by gradient descent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::INPUT_TOL;
use crate::train::{run_first_order, Direction, StepSchedule, TrainState};

/// Outer-loop trajectory of meta-SL.
pub type MetaSlState = TrainState;

/// Slack allowed on `‖x‖₂ ≤ 1` and `|y| ≤ Y_max`.
const BOUND_SLACK: f64 = 1e-12;

/// Finite conditional distribution of the label at one domain point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelDistribution {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let dist = Self { values, probs };
        dist.validate(f64::INFINITY)?;
        Ok(dist)
    }

    /// Point mass at `y`.
    pub fn deterministic(y: f64) -> Self {
        Self {
            values: vec![y],
            probs: vec![1.0],
        }
    }

    fn validate(&self, y_max: f64) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.probs.len() {
            return Err(Error::InvalidTaskSet(
                "label values and probabilities must be non-empty and of equal length".into(),
            ));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidTaskSet("label probabilities must be ≥ 0".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > INPUT_TOL {
            return Err(Error::InvalidTaskSet(format!("label probabilities sum to {total}")));
        }
        if self
            .values
            .iter()
            .any(|y| !y.is_finite() || y.abs() > y_max + BOUND_SLACK)
        {
            return Err(Error::InvalidTaskSet(format!("label outside [−{y_max}, {y_max}]")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(y, p)| y * p).sum()
    }

    /// Probability of the exact label value `y`.
    pub fn prob_of(&self, y: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.probs)
            .filter(|(v, _)| **v == y)
            .map(|(_, p)| p)
            .sum()
    }
}

/// One subtask: a label distribution per domain point.
#[derive(Debug, Clone, PartialEq)]
pub struct SlTask {
    pub labels: Vec<LabelDistribution>,
}

impl SlTask {
    /// `E[y | x]` at every domain point.
    pub fn conditional_mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.labels.len(), self.labels.iter().map(LabelDistribution::mean))
    }
}

/// Tasks sharing a finite domain, its marginal and a feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SlTaskSetDocument", into = "SlTaskSetDocument")]
pub struct SlTaskSet {
    domain: DMatrix<f64>,
    marginal: DVector<f64>,
    tasks: Vec<SlTask>,
    features: DMatrix<f64>,
    eta: f64,
    y_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlTaskSetDocument {
    pub domain: Vec<Vec<f64>>,
    pub marginal: Vec<f64>,
    pub tasks: Vec<SlTaskDocument>,
    pub features: Vec<Vec<f64>>,
    pub eta: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlTaskDocument {
    pub labels: Vec<LabelEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    pub x_index: usize,
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidTaskSet(format!("{what} must be non-empty, rectangular rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<SlTaskSetDocument> for SlTaskSet {
    type Error = Error;

    fn try_from(doc: SlTaskSetDocument) -> Result<Self> {
        let domain = rows_to_matrix(&doc.domain, "domain")?;
        let features = rows_to_matrix(&doc.features, "features")?;
        let n = domain.nrows();
        let mut tasks = Vec::with_capacity(doc.tasks.len());
        for (i, task) in doc.tasks.into_iter().enumerate() {
            let mut slots: Vec<Option<LabelDistribution>> = vec![None; n];
            for entry in task.labels {
                let slot = slots.get_mut(entry.x_index).ok_or_else(|| {
                    Error::InvalidTaskSet(format!("task {i}: x_index {} out of range", entry.x_index))
                })?;
                if slot.is_some() {
                    return Err(Error::InvalidTaskSet(format!(
                        "task {i}: duplicate x_index {}",
                        entry.x_index
                    )));
                }
                *slot = Some(LabelDistribution {
                    values: entry.values,
                    probs: entry.probs,
                });
            }
            let labels = slots
                .into_iter()
                .enumerate()
                .map(|(k, s)| {
                    s.ok_or_else(|| Error::InvalidTaskSet(format!("task {i}: no labels for point {k}")))
                })
                .collect::<Result<Vec<_>>>()?;
            tasks.push(SlTask { labels });
        }
        SlTaskSet::new(domain, DVector::from_vec(doc.marginal), tasks, features, doc.eta, doc.y_max)
    }
}

impl From<SlTaskSet> for SlTaskSetDocument {
    fn from(set: SlTaskSet) -> Self {
        SlTaskSetDocument {
            domain: matrix_to_rows(&set.domain),
            marginal: set.marginal.iter().copied().collect(),
            tasks: set
                .tasks
                .into_iter()
                .map(|t| SlTaskDocument {
                    labels: t
                        .labels
                        .into_iter()
                        .enumerate()
                        .map(|(x_index, l)| LabelEntry {
                            x_index,
                            values: l.values,
                            probs: l.probs,
                        })
                        .collect(),
                })
                .collect(),
            features: matrix_to_rows(&set.features),
            eta: set.eta,
            y_max: set.y_max,
        }
    }
}

impl SlTaskSet {
    pub fn new(
        domain: DMatrix<f64>,
        marginal: DVector<f64>,
        tasks: Vec<SlTask>,
        features: DMatrix<f64>,
        eta: f64,
        y_max: f64,
    ) -> Result<Self> {
        let n = domain.nrows();
        if n == 0 || tasks.is_empty() {
            return Err(Error::InvalidTaskSet("domain and task list must be non-empty".into()));
        }
        if let Some(k) = domain
            .row_iter()
            .position(|x| x.iter().any(|v| !v.is_finite()) || x.norm() > 1.0 + BOUND_SLACK)
        {
            return Err(Error::InvalidTaskSet(format!("domain point {k} has norm above 1")));
        }
        if marginal.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "marginal has {} entries, domain has {n} points",
                marginal.len()
            )));
        }
        if marginal.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidTaskSet("marginal must be strictly positive".into()));
        }
        if (marginal.sum() - 1.0).abs() > INPUT_TOL {
            return Err(Error::InvalidTaskSet(format!("marginal sums to {}", marginal.sum())));
        }
        if features.nrows() != n || features.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "features must have {n} non-empty rows"
            )));
        }
        if let Some(k) = features
            .row_iter()
            .position(|x| x.iter().any(|v| !v.is_finite()) || x.norm() > 1.0 + BOUND_SLACK)
        {
            return Err(Error::InvalidFeatures(format!("feature row {k} has norm above 1")));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidTaskSet(format!("eta {eta} must be finite and ≥ 0")));
        }
        if !(y_max > 0.0 && y_max.is_finite()) {
            return Err(Error::InvalidTaskSet(format!("y_max {y_max} must be positive")));
        }
        for (i, task) in tasks.iter().enumerate() {
            if task.labels.len() != n {
                return Err(Error::InvalidTaskSet(format!(
                    "task {i} labels {} points, domain has {n}",
                    task.labels.len()
                )));
            }
            for label in &task.labels {
                label.validate(y_max)?;
            }
        }
        Ok(Self {
            domain,
            marginal,
            tasks,
            features,
            eta,
            y_max,
        })
    }

    pub fn domain(&self) -> &DMatrix<f64> {
        &self.domain
    }

    pub fn marginal(&self) -> &DVector<f64> {
        &self.marginal
    }

    pub fn tasks(&self) -> &[SlTask] {
        &self.tasks
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn n_points(&self) -> usize {
        self.domain.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::new(
            self.domain.clone(),
            self.marginal.clone(),
            self.tasks.clone(),
            self.features.clone(),
            eta,
            self.y_max,
        )
    }

    pub fn with_tasks(&self, tasks: Vec<SlTask>) -> Result<Self> {
        Self::new(
            self.domain.clone(),
            self.marginal.clone(),
            tasks,
            self.features.clone(),
            self.eta,
            self.y_max,
        )
    }

    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.domain.clone(),
            self.marginal.clone(),
            self.tasks.clone(),
            features,
            self.eta,
            self.y_max,
        )
    }

    /// The linear model `h_θ(x) = φ(x)ᵀθ` on this set's features.
    pub fn linear_model(&self) -> LinearSlModel {
        LinearSlModel {
            features: self.features.clone(),
        }
    }

    /// Meta-SL problem for the linear model.
    pub fn linear_problem<'a>(&'a self, model: &'a LinearSlModel) -> MetaSlProblem<'a, LinearSlModel> {
        self.problem_with(model)
    }

    pub fn problem_with<'a, M: SlModel + ?Sized>(&'a self, model: &'a M) -> MetaSlProblem<'a, M> {
        MetaSlProblem {
            set: self,
            model,
            eta: self.eta,
        }
    }
}

/// Parameterized hypothesis class evaluated on the finite domain.
pub trait SlModel: Sync {
    fn n_params(&self) -> usize;
    /// `h_θ(x)` at every domain point.
    fn predict(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;
    /// `N × n_params` matrix of `∇_θ h_θ(x)ᵀ` rows.
    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// `h_θ(x) = φ(x)ᵀθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSlModel {
    features: DMatrix<f64>,
}

impl LinearSlModel {
    pub fn new(features: DMatrix<f64>) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    fn check(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.features.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, features have dim {}",
                theta.len(),
                self.features.ncols()
            )));
        }
        Ok(())
    }
}

impl SlModel for LinearSlModel {
    fn n_params(&self) -> usize {
        self.features.ncols()
    }

    fn predict(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(theta)?;
        Ok(&self.features * theta)
    }

    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(theta)?;
        Ok(self.features.clone())
    }
}

/// Hypothesis values cached over the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SlHypothesis {
    pub theta: DVector<f64>,
    pub values: DVector<f64>,
}

impl SlHypothesis {
    pub fn new<M: SlModel + ?Sized>(model: &M, theta: DVector<f64>) -> Result<Self> {
        let values = model.predict(&theta)?;
        Ok(Self { theta, values })
    }
}

/// `R(h) = Σ_x ρ(x) Σ_y p(y|x) (h(x) − y)²`.
pub fn risk(task: &SlTask, marginal: &DVector<f64>, h: &DVector<f64>) -> f64 {
    task.labels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            marginal[k]
                * l.values
                    .iter()
                    .zip(&l.probs)
                    .map(|(y, p)| p * (h[k] - y) * (h[k] - y))
                    .sum::<f64>()
        })
        .sum()
}

/// `(δR/δh)(x) = 2(h(x) − E[y | x])`.
pub fn frechet_derivative_sq(task: &SlTask, h: &DVector<f64>) -> DVector<f64> {
    (h - task.conditional_mean()) * 2.0
}

/// `⟨f, g⟩_ρ`.
pub fn inner_rho(marginal: &DVector<f64>, f: &DVector<f64>, g: &DVector<f64>) -> f64 {
    marginal.component_mul(f).dot(g)
}

/// `θ − η ∇_θ R(h_θ)` with `∇_θ R = Σ_x ρ(x)·(δR/δh)(x)·∇_θ h_θ(x)`.
pub fn inner_gd_step<M: SlModel + ?Sized>(
    model: &M,
    task: &SlTask,
    marginal: &DVector<f64>,
    theta: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta {eta} must be finite and ≥ 0")));
    }
    let h = model.predict(theta)?;
    let jac = model.jacobian(theta)?;
    let grad = jac.tr_mul(&marginal.component_mul(&frechet_derivative_sq(task, &h)));
    Ok(theta - grad * eta)
}

/// All tasks evaluated at one `θ`.
#[derive(Debug, Clone)]
pub struct SlEvaluation {
    /// `h_θ` on the domain.
    pub values: DVector<f64>,
    /// Adapted parameters `θ_i`.
    pub adapted: Vec<DVector<f64>>,
    /// `h_{θ_i}` on the domain.
    pub adapted_values: Vec<DVector<f64>>,
    /// `δR_i/δh_{θ_i}`.
    pub frechet: Vec<DVector<f64>>,
    /// `R_i(h_{θ_i})`.
    pub risks: Vec<f64>,
}

impl SlEvaluation {
    pub fn objective(&self) -> f64 {
        self.risks.iter().sum::<f64>() / self.risks.len() as f64
    }
}

/// Meta-SL problem for a given hypothesis class.
#[derive(Clone, Copy)]
pub struct MetaSlProblem<'a, M: SlModel + ?Sized> {
    pub set: &'a SlTaskSet,
    pub model: &'a M,
    pub eta: f64,
}

impl<'a, M: SlModel + ?Sized> MetaSlProblem<'a, M> {
    pub fn evaluate(&self, theta: &DVector<f64>) -> Result<SlEvaluation> {
        let rho = self.set.marginal();
        let values = self.model.predict(theta)?;
        let jac = self.model.jacobian(theta)?;
        let mut out = SlEvaluation {
            values: values.clone(),
            adapted: Vec::with_capacity(self.set.n_tasks()),
            adapted_values: Vec::with_capacity(self.set.n_tasks()),
            frechet: Vec::with_capacity(self.set.n_tasks()),
            risks: Vec::with_capacity(self.set.n_tasks()),
        };
        for task in self.set.tasks() {
            let step = jac.tr_mul(&rho.component_mul(&frechet_derivative_sq(task, &values)));
            let adapted = theta - step * self.eta;
            let adapted_values = self.model.predict(&adapted)?;
            out.frechet.push(frechet_derivative_sq(task, &adapted_values));
            out.risks.push(risk(task, rho, &adapted_values));
            out.adapted.push(adapted);
            out.adapted_values.push(adapted_values);
        }
        Ok(out)
    }

    /// `L(θ) = (1/n) Σ_i R_i(h_{θ_i})`.
    pub fn objective(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(theta)?.objective())
    }

    /// `K v = v − 2η Σ_x ρ(x) ∇h_θ(x) ∇h_θ(x)ᵀ v`, with `jac` the Jacobian at `θ`.
    pub fn apply_kernel(&self, jac: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let rho = self.set.marginal();
        v - jac.tr_mul(&rho.component_mul(&(jac * v))) * (2.0 * self.eta)
    }

    fn gradient_from(&self, theta: &DVector<f64>, eval: &SlEvaluation) -> Result<DVector<f64>> {
        let rho = self.set.marginal();
        let jac = self.model.jacobian(theta)?;
        let mut total = DVector::zeros(theta.len());
        for (adapted, frechet) in eval.adapted.iter().zip(&eval.frechet) {
            let jac_i = self.model.jacobian(adapted)?;
            total += jac_i.tr_mul(&rho.component_mul(frechet));
        }
        Ok(self.apply_kernel(&jac, &(total / eval.risks.len() as f64)))
    }

    /// `∇L(θ) = (1/n) Σ_i K ∫ (δR_i/δh_{θ_i})(x) ∇h_{θ_i}(x) dρ(x)`.
    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let eval = self.evaluate(theta)?;
        self.gradient_from(theta, &eval)
    }

    pub fn objective_and_gradient(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let eval = self.evaluate(theta)?;
        Ok((eval.objective(), self.gradient_from(theta, &eval)?))
    }
}

/// `L(θ)` for the linear model.
pub fn meta_objective_sl(set: &SlTaskSet, theta: &DVector<f64>) -> Result<f64> {
    let model = set.linear_model();
    set.linear_problem(&model).objective(theta)
}

pub fn meta_gradient_sl(set: &SlTaskSet, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let model = set.linear_model();
    set.linear_problem(&model).gradient(theta)
}

/// `K_η = I − 2η Σ_x ρ(x) φ(x)φ(x)ᵀ` for the linear model.
pub fn linear_kernel(set: &SlTaskSet) -> DMatrix<f64> {
    let phi = set.features();
    let d = phi.ncols();
    let mut weighted = phi.clone();
    for (k, mut row) in weighted.row_iter_mut().enumerate() {
        row *= set.marginal()[k];
    }
    DMatrix::identity(d, d) - phi.tr_mul(&weighted) * (2.0 * set.eta())
}

/// Exact minimizer of the (quadratic) linear meta-objective; minimum-norm
/// when the minimizer is not unique.
pub fn linear_closed_form_optimum(set: &SlTaskSet) -> Result<DVector<f64>> {
    let phi = set.features();
    let sqrt_rho = set.marginal().map(f64::sqrt);
    let kernel = linear_kernel(set);
    let mut design = phi * &kernel;
    for (k, mut row) in design.row_iter_mut().enumerate() {
        row *= sqrt_rho[k];
    }
    let mut target = DVector::zeros(set.n_points());
    for task in set.tasks() {
        let mean = task.conditional_mean();
        let b = phi.tr_mul(&set.marginal().component_mul(&mean));
        let shift = phi * b * (2.0 * set.eta());
        target += (mean - shift).component_mul(&sqrt_rho);
    }
    target /= set.n_tasks() as f64;
    let svd = design.svd(true, true);
    svd.solve(&target, 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE))
        .map_err(|_| Error::SingularSystem("linear meta-SL normal equations"))
}

/// Gradient descent `θ_{ℓ+1} = θ_ℓ − α_ℓ ∇L(θ_ℓ)`.
pub fn run_meta_sl<M: SlModel + ?Sized>(
    problem: &MetaSlProblem<'_, M>,
    theta0: DVector<f64>,
    schedule: StepSchedule,
    iterations: usize,
) -> Result<MetaSlState> {
    run_first_order(
        |theta| problem.objective_and_gradient(theta),
        theta0,
        schedule,
        iterations,
        Direction::Descent,
    )
}
