//! Optimality-gap certificates for meta-RL stationary points.
//!
//! By the performance-difference identity, `L(θ*) − L(ω) = ⟨D, f_ω⟩_ϱ` where
//! `ϱ` is the mixed meta-visitation measure at `ω` and `D = dG/dϱ` is the
//! density of the refined gradient integrand, so `∇L(ω) = Jacᵀ(ϱ ∘ D)`.
//! Splitting `f_ω = Jac·v + (f_ω − Jac·v)` and applying Cauchy–Schwarz gives
//! `L(θ*) − L(ω) ≤ ∇L(ω)ᵀv + ‖D‖_ϱ ‖f_ω − Jac·v‖_ϱ`, with `‖D‖_ϱ` bounded by
//! the concentrability constant `C₀` times a per-task factor.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::{best_linear_fit, weighted_residual};
use crate::mdp::flatten_pairs;
use crate::meta_rl::{MetaEvaluation, MetaRlProblem, MetaRlTaskSet, RefinedTerms};
use crate::neural::NeuralModel;
use crate::policy::EnergyModel;
use crate::train::{multi_start_search, Direction, OptimumSearch, OracleSettings};

/// Slack on `lhs ≤ rhs` when deciding whether a bound holds.
pub const HOLD_TOL: f64 = 1e-9;

/// Denominator magnitude below which `f_ω` is left undefined.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// Meta-visitation measures of all tasks at one `θ`, flattened over pairs.
#[derive(Debug, Clone)]
pub struct MetaVisitationSet {
    /// `joint[i][(k', k)] = σ^{k}_{i,π_θ}(k') · σ_{π_{i,θ}}(k)`.
    pub joint: Vec<DMatrix<f64>>,
    /// `ς_i`, the first marginal of `joint[i]`.
    pub marginal: Vec<DVector<f64>>,
    /// `ϱ = (1/n) Σ_i ς_i`.
    pub mixed: DVector<f64>,
}

/// Which `ε`-stationarity notion a report uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StationarityForm {
    /// `∇L(ω)ᵀv ≤ ε` for `‖v‖₂ ≤ 1`; the stationarity term is `R·ε`.
    UnitBall,
    /// `∇L(ω)ᵀ(v − ω) ≤ ε` for `‖v − W_init‖₂ ≤ R`; the term is `ε` itself.
    InitBall,
}

/// Every term of a meta-RL optimality-gap certificate.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    /// `L(θ*) − L(ω)` with `θ*` the best-found optimum.
    pub lhs: f64,
    pub epsilon: f64,
    pub radius: f64,
    /// `R·ε` or `ε`, depending on `stationarity`.
    pub term_stationarity: f64,
    pub c0: f64,
    /// Multiplier of `approx_error`.
    pub constant: f64,
    pub approx_error: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Pairs where `f_ω` is undefined and which are left out of the fit.
    pub degenerate_points: usize,
    pub fully_degenerate: bool,
    pub stationarity: StationarityForm,
    /// `R^{3/2} m^{-1/4}` for network audits.
    pub linearization_proxy: Option<f64>,
    /// `‖Φ_ωᵀv₀ − f(·; v₀)‖_ϱ` at the fitted network `v₀`.
    pub measured_linearization: Option<f64>,
}

impl BoundReport {
    fn finish(mut self) -> Self {
        self.rhs = self.term_stationarity + self.constant * self.approx_error;
        self.holds = self.lhs <= self.rhs + HOLD_TOL;
        self
    }
}

/// `f_ω` tabulated over flattened pairs.
#[derive(Debug, Clone)]
pub struct FOmegaTable {
    /// `f_ω = N / D`; zero where excluded.
    pub values: DVector<f64>,
    pub numerator: DVector<f64>,
    pub denominator: DVector<f64>,
    /// Flattened indices where `|D| < DEGENERACY_TOL`.
    pub excluded: Vec<usize>,
}

impl FOmegaTable {
    pub fn is_fully_degenerate(&self) -> bool {
        self.excluded.len() == self.values.len()
    }

    /// `ϱ` with excluded pairs zeroed.
    pub fn fit_measure(&self, mixed: &DVector<f64>) -> DVector<f64> {
        let mut m = mixed.clone();
        for &k in &self.excluded {
            m[k] = 0.0;
        }
        m
    }
}

/// Meta-visitation measures, refined-gradient terms and `ϱ` at `ω`.
struct AuditState {
    eval: MetaEvaluation,
    refined: Vec<RefinedTerms>,
    mixed: DVector<f64>,
}

fn audit_state<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    theta: &DVector<f64>,
) -> Result<AuditState> {
    let eval = problem.evaluate(theta, true)?;
    let refined = eval
        .tasks
        .iter()
        .map(|t| problem.refined_terms(t))
        .collect::<Result<Vec<_>>>()?;
    let n = refined.len() as f64;
    let mut mixed = DVector::zeros(refined[0].varsigma.len());
    for r in &refined {
        mixed += &r.varsigma;
    }
    mixed /= n;
    Ok(AuditState {
        eval,
        refined,
        mixed,
    })
}

/// Joint, marginal and mixed meta-visitation measures at `theta`.
pub fn meta_visitations<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    theta: &DVector<f64>,
) -> Result<MetaVisitationSet> {
    let eval = problem.evaluate(theta, true)?;
    let na = problem.model.n_actions();
    let mut joint = Vec::with_capacity(eval.tasks.len());
    let mut marginal = Vec::with_capacity(eval.tasks.len());
    for terms in &eval.tasks {
        let sigma_init = terms.main_eval.sigma_init.as_ref().expect("requested");
        let sigma = flatten_pairs(&terms.adapted_eval.sigma);
        let mut j = sigma_init.transpose();
        for (k, mut col) in j.column_iter_mut().enumerate() {
            col *= sigma[k];
        }
        marginal.push(DVector::from_fn(j.nrows(), |r, _| j.row(r).sum()));
        joint.push(j);
    }
    let mut mixed = DVector::zeros(marginal[0].len());
    for m in &marginal {
        mixed += m;
    }
    mixed /= marginal.len() as f64;
    if let Some(k) = mixed.iter().position(|v| *v <= 0.0) {
        return Err(Error::ZeroMass {
            measure: "mixed meta-visitation",
            state: k / na,
            action: k % na,
        });
    }
    Ok(MetaVisitationSet {
        joint,
        marginal,
        mixed,
    })
}

fn l2_ratio_norm(numerator: &DVector<f64>, base: &DVector<f64>) -> f64 {
    numerator
        .iter()
        .zip(base.iter())
        .map(|(a, b)| a * a / b)
        .sum::<f64>()
        .sqrt()
}

fn concentrability_of(state: &AuditState) -> f64 {
    let mut c0 = 0.0_f64;
    for (terms, refined) in state.eval.tasks.iter().zip(&state.refined) {
        let sigma = flatten_pairs(&terms.adapted_eval.sigma);
        c0 = c0
            .max(l2_ratio_norm(&sigma, &state.mixed))
            .max(l2_ratio_norm(&refined.varsigma, &state.mixed));
    }
    c0
}

/// `C₀ = max_i max(‖dσ_{π_{i,θ}}/dϱ‖_ϱ, ‖dς_i/dϱ‖_ϱ)`.
pub fn concentrability<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    theta: &DVector<f64>,
) -> Result<f64> {
    Ok(concentrability_of(&audit_state(problem, theta)?))
}

fn f_omega_of<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    state: &AuditState,
    theta_star: &DVector<f64>,
) -> Result<FOmegaTable> {
    let star = problem.evaluate(theta_star, false)?;
    let n = state.refined.len() as f64;
    let size = state.mixed.len();
    let mut numerator = DVector::zeros(size);
    let mut denominator = DVector::zeros(size);
    for ((at_omega, refined), at_star) in state.eval.tasks.iter().zip(&state.refined).zip(&star.tasks) {
        let adv = flatten_pairs(&at_omega.adapted_eval.values.adv);
        let sigma_star = flatten_pairs(&at_star.adapted_eval.sigma);
        numerator += adv.component_mul(&sigma_star).component_div(&state.mixed) / (1.0 - at_omega.discount);
        denominator += refined.g.component_mul(&refined.varsigma).component_div(&state.mixed);
    }
    numerator /= n;
    denominator /= n;
    let mut values = DVector::zeros(size);
    let mut excluded = Vec::new();
    for k in 0..size {
        if denominator[k].abs() < DEGENERACY_TOL {
            excluded.push(k);
        } else {
            values[k] = numerator[k] / denominator[k];
        }
    }
    Ok(FOmegaTable {
        values,
        numerator,
        denominator,
        excluded,
    })
}

/// Tabulates `f_ω = N / D` with
/// `N = (1/n) Σ_i (1−γ_i)^{-1} A_i^{π_{i,ω}} · dσ_{π_{i,θ*}}/dϱ` and
/// `D = (1/n) Σ_i g_i · dς_i/dϱ`.
pub fn f_omega<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    omega: &DVector<f64>,
    theta_star: &DVector<f64>,
) -> Result<FOmegaTable> {
    let state = audit_state(problem, omega)?;
    f_omega_of(problem, &state, theta_star)
}

/// `(1/n) Σ_i 2C₀Q_max/(τ(1−γ_i)) · (1 + 2Q_max γ_i η/(1−γ_i))`.
pub fn gap_constant<M: EnergyModel + ?Sized>(problem: &MetaRlProblem<'_, M>, c0: f64, q_max: f64) -> f64 {
    let n = problem.tasks.len() as f64;
    problem
        .tasks
        .iter()
        .map(|t| {
            let g = t.discount();
            2.0 * c0 * q_max / (problem.temperature * (1.0 - g)) * (1.0 + 2.0 * q_max * g * problem.eta / (1.0 - g))
        })
        .sum::<f64>()
        / n
}

struct Prepared {
    lhs: f64,
    gradient: DVector<f64>,
    jacobian: DMatrix<f64>,
    energy: DVector<f64>,
    c0: f64,
    constant: f64,
    table: FOmegaTable,
    mixed: DVector<f64>,
}

fn prepare<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    omega: &DVector<f64>,
    theta_star: &DVector<f64>,
    q_max: f64,
) -> Result<Prepared> {
    let state = audit_state(problem, omega)?;
    let jacobian = state.eval.jacobian.clone().expect("requested");
    let mut gradient = DVector::zeros(jacobian.ncols());
    for r in &state.refined {
        gradient += jacobian.tr_mul(&r.varsigma.component_mul(&r.g));
    }
    gradient /= state.refined.len() as f64;
    let lhs = problem.objective(theta_star)? - state.eval.objective();
    let c0 = concentrability_of(&state);
    let constant = gap_constant(problem, c0, q_max);
    let table = f_omega_of(problem, &state, theta_star)?;
    Ok(Prepared {
        lhs,
        gradient,
        jacobian,
        energy: state.eval.energy.clone(),
        c0,
        constant,
        table,
        mixed: state.mixed,
    })
}

/// Certificate `L(θ*) − L(ω) ≤ R·ε + C·inf_{‖v‖≤R} ‖f_ω − φᵀv‖_ϱ` for linear energies.
pub fn audit_linear_rl_gap(
    set: &MetaRlTaskSet,
    omega: &DVector<f64>,
    theta_star: &DVector<f64>,
    radius: f64,
) -> Result<BoundReport> {
    let problem = set.problem();
    let p = prepare(&problem, omega, theta_star, set.q_max())?;
    let epsilon = p.gradient.norm();
    let fully_degenerate = p.table.is_fully_degenerate();
    let approx_error = if fully_degenerate {
        0.0
    } else {
        best_linear_fit(&p.table.values, &p.jacobian, &p.table.fit_measure(&p.mixed), radius)?.residual
    };
    Ok(BoundReport {
        lhs: p.lhs,
        epsilon,
        radius,
        term_stationarity: radius * epsilon,
        c0: p.c0,
        constant: p.constant,
        approx_error,
        rhs: 0.0,
        holds: false,
        degenerate_points: p.table.excluded.len(),
        fully_degenerate,
        stationarity: StationarityForm::UnitBall,
        linearization_proxy: None,
        measured_linearization: None,
    }
    .finish())
}

/// Certificate for network energies `E(s,a) = f((s,a); W)`:
/// `L(θ*) − L(ω) ≤ ε + C·inf_{‖u‖≤R_T} ‖c_ω − φ_ωᵀ(W_init + u)‖_ϱ` with
/// `c_ω = f(·; ω) + f_ω` and `ε = sup_{‖v−W_init‖≤R_T} ∇L(ω)ᵀ(v − ω)`.
pub fn audit_neural_rl_gap(
    set: &MetaRlTaskSet,
    model: &NeuralModel,
    omega: &DVector<f64>,
    theta_star: &DVector<f64>,
    radius: f64,
) -> Result<BoundReport> {
    let problem = set.problem_with(model);
    let p = prepare(&problem, omega, theta_star, set.q_max())?;
    let w_init = model.net().w_init();
    let epsilon = radius * p.gradient.norm() + p.gradient.dot(&(w_init - omega));
    let fully_degenerate = p.table.is_fully_degenerate();
    let anchor = &p.jacobian * w_init;
    let measure = p.table.fit_measure(&p.mixed);
    let mut target = &p.table.values + &p.energy - &anchor;
    for &k in &p.table.excluded {
        target[k] = 0.0;
    }
    let (approx_error, measured) = if fully_degenerate {
        (0.0, 0.0)
    } else {
        let fit = best_linear_fit(&target, &p.jacobian, &measure, radius)?;
        let v0 = w_init + &fit.v;
        let actual = model.outputs_at(&v0)?;
        let measured = weighted_residual(&actual, &p.jacobian, &p.mixed, &v0);
        (fit.residual, measured)
    };
    let m = model.net().width() as f64;
    Ok(BoundReport {
        lhs: p.lhs,
        epsilon,
        radius,
        term_stationarity: epsilon,
        c0: p.c0,
        constant: p.constant,
        approx_error,
        rhs: 0.0,
        holds: false,
        degenerate_points: p.table.excluded.len(),
        fully_degenerate,
        stationarity: StationarityForm::InitBall,
        linearization_proxy: Some(radius.powf(1.5) * m.powf(-0.25)),
        measured_linearization: Some(measured),
    }
    .finish())
}

/// Best-found maximizer of `L` by multi-start adaptive ascent around `center`.
pub fn best_found_optimum<M: EnergyModel + ?Sized>(
    problem: &MetaRlProblem<'_, M>,
    center: &DVector<f64>,
    extra_starts: &[DVector<f64>],
    settings: &OracleSettings,
    seed: u64,
) -> Result<OptimumSearch> {
    multi_start_search(
        |theta| problem.objective_and_gradient(theta),
        |theta| problem.objective(theta),
        center,
        extra_starts,
        settings,
        seed,
        Direction::Ascent,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TabularMdp;
    use crate::policy::FeatureMap;

    fn set(eta: f64) -> MetaRlTaskSet {
        let t1 = TabularMdp::new(
            DMatrix::from_row_slice(4, 2, &[0.7, 0.3, 0.2, 0.8, 0.4, 0.6, 0.9, 0.1]),
            DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.8, 0.1]),
            0.85,
            DVector::from_vec(vec![0.4, 0.6]),
        )
        .unwrap();
        let t2 = t1
            .with_reward(DMatrix::from_row_slice(2, 2, &[-0.5, 0.4, 0.2, 0.9]))
            .unwrap();
        let features = FeatureMap::new(
            2,
            2,
            DMatrix::from_row_slice(4, 2, &[0.5, 0.1, -0.3, 0.6, 0.2, -0.7, 0.0, 0.4]),
        )
        .unwrap();
        MetaRlTaskSet::new(vec![t1, t2], features, 1.0, eta, 1.0).unwrap()
    }

    #[test]
    fn measures_are_consistent() {
        let set = set(0.3);
        let theta = DVector::from_vec(vec![0.2, -0.4]);
        let mv = meta_visitations(&set.problem(), &theta).unwrap();
        for (j, m) in mv.joint.iter().zip(&mv.marginal) {
            assert!((j.sum() - 1.0).abs() < 1e-10);
            assert!((m.sum() - 1.0).abs() < 1e-10);
        }
        assert!((mv.mixed.sum() - 1.0).abs() < 1e-12);
        assert!(concentrability(&set.problem(), &theta).unwrap() >= 1.0);
    }

    #[test]
    fn audit_at_optimum_has_zero_lhs() {
        let set = set(0.2);
        let omega = DVector::from_vec(vec![0.7, 0.1]);
        let report = audit_linear_rl_gap(&set, &omega, &omega, 2.0).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert!(report.holds);
        assert!(report.rhs >= 0.0);
    }
}
