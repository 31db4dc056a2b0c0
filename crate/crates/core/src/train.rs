//! First-order outer loop shared by meta-RL (ascent) and meta-SL (descent).

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradient-norm threshold for early stopping.
pub const EARLY_STOP_NORM: f64 = 1e-8;

/// Step-size schedule `α_ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α / √(ℓ + 1)`.
    InverseSqrt { alpha: f64 },
}

impl StepSchedule {
    pub fn step(&self, iteration: usize) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::InverseSqrt { alpha } => alpha / ((iteration + 1) as f64).sqrt(),
        }
    }

    fn base(&self) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } | StepSchedule::InverseSqrt { alpha } => alpha,
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Constant { alpha: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

/// Trajectory record of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: DVector<f64>,
    /// Number of parameter updates performed.
    pub iteration: usize,
    /// Objective at every visited iterate, including the start.
    pub objective_history: Vec<f64>,
    /// `‖∇L‖₂` at every visited iterate, including the start.
    pub grad_norm_history: Vec<f64>,
    /// `max_ℓ ‖θ_ℓ − θ_0‖₂` over the trajectory.
    pub max_displacement: f64,
}

impl TrainState {
    /// Gradient norm at the returned iterate.
    pub fn epsilon(&self) -> f64 {
        *self.grad_norm_history.last().expect("history is never empty")
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("history is never empty")
    }
}

/// Runs `θ ← θ ± α_ℓ ∇L(θ)` for at most `iterations` steps.
pub fn run_first_order<F>(
    mut eval: F,
    theta0: DVector<f64>,
    schedule: StepSchedule,
    iterations: usize,
    direction: Direction,
) -> Result<TrainState>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    if !(schedule.base() > 0.0 && schedule.base().is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size {} must be positive",
            schedule.base()
        )));
    }
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    let mut theta = theta0.clone();
    let mut objective_history = Vec::with_capacity(iterations + 1);
    let mut grad_norm_history = Vec::with_capacity(iterations + 1);
    let mut max_displacement = 0.0_f64;
    let mut iteration = 0;
    loop {
        let (objective, grad) = eval(&theta)?;
        let norm = grad.norm();
        if !objective.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective {objective} or gradient norm {norm} at iteration {iteration}"
            )));
        }
        objective_history.push(objective);
        grad_norm_history.push(norm);
        if iteration == iterations || norm < EARLY_STOP_NORM {
            break;
        }
        theta += grad * (sign * schedule.step(iteration));
        max_displacement = max_displacement.max((&theta - &theta0).norm());
        iteration += 1;
    }
    Ok(TrainState {
        theta,
        iteration,
        objective_history,
        grad_norm_history,
        max_displacement,
    })
}

/// Settings of the multi-start search used as a stand-in for the global optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub starts: usize,
    pub iterations: usize,
    /// Standard deviation of the Gaussian start perturbations.
    pub init_scale: f64,
    pub initial_step: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            starts: 16,
            iterations: 300,
            init_scale: 1.0,
            initial_step: 1.0,
        }
    }
}

/// Gradient steps with an adaptive step size: a step is accepted only if it
/// strictly improves the objective, after which the step doubles; otherwise
/// it halves. Returns the final point and its objective.
pub fn adaptive_search<F, G>(
    mut eval: F,
    mut objective: G,
    theta0: DVector<f64>,
    iterations: usize,
    initial_step: f64,
    direction: Direction,
) -> Result<(DVector<f64>, f64)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    G: FnMut(&DVector<f64>) -> Result<f64>,
{
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    let better = |new: f64, old: f64| sign * (new - old) > 0.0;
    let mut theta = theta0;
    let (mut value, mut grad) = eval(&theta)?;
    let mut step = initial_step;
    'outer: for _ in 0..iterations {
        if grad.norm() < 1e-12 {
            break;
        }
        loop {
            let candidate = &theta + &grad * (sign * step);
            let candidate_value = objective(&candidate)?;
            if candidate_value.is_finite() && better(candidate_value, value) {
                theta = candidate;
                step = (2.0 * step).min(1e6);
                let (v, g) = eval(&theta)?;
                value = v;
                grad = g;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                break 'outer;
            }
        }
    }
    Ok((theta, value))
}

/// Best point found by [`multi_start_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimumSearch {
    pub theta: DVector<f64>,
    pub objective: f64,
    /// Index of the winning start; extra starts follow the random ones.
    pub start: usize,
}

/// Runs [`adaptive_search`] from `settings.starts` Gaussian perturbations of
/// `center` (the first start is `center` itself) and from every point of
/// `extra_starts`, and keeps the best result.
pub fn multi_start_search<F, G>(
    mut eval: F,
    mut objective: G,
    center: &DVector<f64>,
    extra_starts: &[DVector<f64>],
    settings: &OracleSettings,
    seed: u64,
    direction: Direction,
) -> Result<OptimumSearch>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    G: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(settings.starts + extra_starts.len());
    for k in 0..settings.starts {
        if k == 0 {
            starts.push(center.clone());
        } else {
            starts.push(DVector::from_fn(center.len(), |j, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                center[j] + settings.init_scale * z
            }));
        }
    }
    starts.extend(extra_starts.iter().cloned());
    let mut best: Option<OptimumSearch> = None;
    for (start, theta0) in starts.into_iter().enumerate() {
        let (theta, value) = adaptive_search(
            &mut eval,
            &mut objective,
            theta0,
            settings.iterations,
            settings.initial_step,
            direction,
        )?;
        let improves = match &best {
            None => true,
            Some(b) => match direction {
                Direction::Ascent => value > b.objective,
                Direction::Descent => value < b.objective,
            },
        };
        if improves {
            best = Some(OptimumSearch {
                theta,
                objective: value,
                start,
            });
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("optimum search needs at least one start".into()))
}
