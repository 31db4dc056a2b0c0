//! Seeded task-family generators: a random base instance plus `δ`-scale
//! per-task perturbations, each draw passing the module validators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::meta_rl::MetaRlTaskSet;
use crate::meta_sl::{LabelDistribution, SlTask, SlTaskSet};
use crate::policy::FeatureMap;

/// Weight of the two-point component of every generated label distribution.
const TWO_POINT_WEIGHT: f64 = 0.8;
/// Conditional means are clipped to `±MEAN_CLIP·Y_max`.
const MEAN_CLIP: f64 = 0.6;
/// Norm of the base linear label function, as a fraction of `Y_max`.
const BASE_SLOPE: f64 = 0.5;
/// Domain points have norm drawn uniformly from `[MIN_RADIUS, 1]`.
const MIN_RADIUS: f64 = 0.3;

/// A family of similar MDPs: one random base instance and `n_tasks`
/// perturbations of scale `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamilySpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_tasks: usize,
    /// Feature dimension.
    pub d: usize,
    pub discount: f64,
    /// Per-task discounts are drawn from `discount ± gamma_jitter`.
    pub gamma_jitter: f64,
    /// Weight of the uniform distribution mixed into every transition row.
    pub eps_mix: f64,
    pub delta: f64,
    pub q_max: f64,
    pub temperature: f64,
    pub eta: f64,
}

impl Default for TaskFamilySpec {
    fn default() -> Self {
        Self {
            n_states: 6,
            n_actions: 3,
            n_tasks: 4,
            d: 8,
            discount: 0.9,
            gamma_jitter: 0.0,
            eps_mix: 0.05,
            delta: 0.1,
            q_max: 1.0,
            temperature: 1.0,
            eta: 0.1,
        }
    }
}

impl TaskFamilySpec {
    fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 || self.n_tasks == 0 || self.d == 0 {
            return Err(Error::InvalidArgument("family sizes must be positive".into()));
        }
        if !(self.eps_mix > 0.0 && self.eps_mix < 1.0) {
            return Err(Error::InvalidArgument(format!("eps_mix {} must lie in (0, 1)", self.eps_mix)));
        }
        let (lo, hi) = (self.discount - self.gamma_jitter, self.discount + self.gamma_jitter);
        if !(self.gamma_jitter >= 0.0 && lo > 0.0 && hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount range [{lo}, {hi}] must lie inside (0, 1)"
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta {} must be ≥ 0", self.delta)));
        }
        Ok(())
    }
}

/// A family of similar meta-SL tasks on a shared random domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlFamilySpec {
    /// Number of domain points.
    pub n_points: usize,
    /// Input dimension; features are the inputs themselves.
    pub d: usize,
    pub n_tasks: usize,
    pub delta: f64,
    pub y_max: f64,
    pub eta: f64,
}

impl Default for SlFamilySpec {
    fn default() -> Self {
        Self {
            n_points: 20,
            d: 8,
            n_tasks: 4,
            delta: 0.1,
            y_max: 1.0,
            eta: 0.1,
        }
    }
}

/// Uniform draw from `[-1, 1]`.
fn symmetric(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..=1.0)
}

/// Flat Dirichlet draw as normalized unit exponentials.
fn dirichlet(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Gaussian direction of unit norm.
fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return raw.iter().map(|v| v / norm).collect();
        }
    }
}

fn mix_uniform(row: &mut [f64], eps: f64) {
    let total: f64 = row.iter().sum();
    let k = row.len() as f64;
    for v in row.iter_mut() {
        let p = if total > 0.0 { *v / total } else { 1.0 / k };
        *v = (1.0 - eps) * p + eps / k;
    }
}

/// Random unit-norm state-action features.
pub fn random_features(n_states: usize, n_actions: usize, d: usize, seed: u64) -> Result<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_features(&mut rng, n_states, n_actions, d)
}

fn sample_features(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize, d: usize) -> Result<FeatureMap> {
    let mut table = DMatrix::zeros(n_states * n_actions, d);
    for k in 0..n_states * n_actions {
        table.set_row(k, &DVector::from_vec(unit_vector(rng, d)).transpose());
    }
    FeatureMap::new(n_states, n_actions, table)
}

/// Base MDP with Dirichlet transition rows and uniform rewards in
/// `[−Q_max, Q_max]`; each task adds `δ·U[−1, 1]` noise to transitions and
/// rewards, clips, renormalizes, and mixes every row with the uniform
/// distribution at rate `eps_mix`.
pub fn generate_mdp_family(spec: &TaskFamilySpec, seed: u64) -> Result<MetaRlTaskSet> {
    spec.validate()?;
    let (ns, na) = (spec.n_states, spec.n_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = sample_features(&mut rng, ns, na, spec.d)?;
    let mut base_transition = DMatrix::zeros(ns * na, ns);
    for k in 0..ns * na {
        let row = dirichlet(&mut rng, ns);
        for (t, p) in row.into_iter().enumerate() {
            base_transition[(k, t)] = p;
        }
    }
    let base_reward = DMatrix::from_fn(ns, na, |_, _| spec.q_max * symmetric(&mut rng));
    let mut init: Vec<f64> = dirichlet(&mut rng, ns);
    mix_uniform(&mut init, spec.eps_mix);
    let init = DVector::from_vec(init);

    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for _ in 0..spec.n_tasks {
        let mut transition = base_transition.clone();
        for k in 0..ns * na {
            let mut row: Vec<f64> = (0..ns)
                .map(|t| (transition[(k, t)] + spec.delta * symmetric(&mut rng)).max(0.0))
                .collect();
            mix_uniform(&mut row, spec.eps_mix);
            for (t, p) in row.into_iter().enumerate() {
                transition[(k, t)] = p;
            }
        }
        let reward = base_reward.map(|r| (r + spec.delta * symmetric(&mut rng)).clamp(-spec.q_max, spec.q_max));
        let discount = spec.discount + spec.gamma_jitter * symmetric(&mut rng);
        tasks.push(TabularMdp::new(transition, reward, discount, init.clone())?);
    }
    MetaRlTaskSet::new(tasks, features, spec.temperature, spec.eta, spec.q_max)
}

/// `n` points with uniform Gaussian directions and norms uniform in `[0.3, 1]`.
pub fn random_domain(n_points: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n_points == 0 || d == 0 {
        return Err(Error::InvalidArgument("domain sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_domain(&mut rng, n_points, d))
}

fn sample_domain(rng: &mut ChaCha8Rng, n_points: usize, d: usize) -> DMatrix<f64> {
    let mut domain = DMatrix::zeros(n_points, d);
    for k in 0..n_points {
        let dir = unit_vector(rng, d);
        let radius = rng.random_range(MIN_RADIUS..=1.0);
        for j in 0..d {
            domain[(k, j)] = radius * dir[j];
        }
    }
    domain
}

/// Label distribution on `grid` with the given mean: the two-point law on the
/// neighbouring grid values mixed with a fixed Dirichlet law on the grid.
fn label_law(grid: &[f64], mean: f64, noise: &[f64]) -> Result<LabelDistribution> {
    let noise_mean: f64 = grid.iter().zip(noise).map(|(y, p)| y * p).sum();
    let target = ((mean - (1.0 - TWO_POINT_WEIGHT) * noise_mean) / TWO_POINT_WEIGHT)
        .clamp(grid[0], grid[grid.len() - 1]);
    let upper = grid
        .iter()
        .position(|&y| y >= target)
        .unwrap_or(grid.len() - 1)
        .max(1);
    let (lo, hi) = (grid[upper - 1], grid[upper]);
    let t = ((target - lo) / (hi - lo)).clamp(0.0, 1.0);
    let mut probs: Vec<f64> = noise.iter().map(|p| (1.0 - TWO_POINT_WEIGHT) * p).collect();
    probs[upper - 1] += TWO_POINT_WEIGHT * (1.0 - t);
    probs[upper] += TWO_POINT_WEIGHT * t;
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    LabelDistribution::new(grid.to_vec(), probs)
}

/// Shared uniform marginal on a random domain, features `φ(x) = x`, labels on
/// the grid `{−Y, −Y/2, 0, Y/2, Y}`; task `i` has conditional mean close to
/// `clip(xᵀθ₀ + δ·U[−1, 1], ±0.6·Y)`.
pub fn generate_sl_family(spec: &SlFamilySpec, seed: u64) -> Result<SlTaskSet> {
    if spec.n_points == 0 || spec.d == 0 || spec.n_tasks == 0 {
        return Err(Error::InvalidArgument("family sizes must be positive".into()));
    }
    if !(spec.delta >= 0.0 && spec.delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta {} must be ≥ 0", spec.delta)));
    }
    let y = spec.y_max;
    let grid = [-y, -0.5 * y, 0.0, 0.5 * y, y];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = sample_domain(&mut rng, spec.n_points, spec.d);
    let theta0: Vec<f64> = unit_vector(&mut rng, spec.d).iter().map(|v| BASE_SLOPE * y * v).collect();
    let base_mean: Vec<f64> = (0..spec.n_points)
        .map(|k| domain.row(k).iter().zip(&theta0).map(|(a, b)| a * b).sum())
        .collect();
    let noise: Vec<Vec<f64>> = (0..spec.n_points).map(|_| dirichlet(&mut rng, grid.len())).collect();
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for _ in 0..spec.n_tasks {
        let labels = (0..spec.n_points)
            .map(|k| {
                let mean = (base_mean[k] + spec.delta * symmetric(&mut rng)).clamp(-MEAN_CLIP * y, MEAN_CLIP * y);
                label_law(&grid, mean, &noise[k])
            })
            .collect::<Result<Vec<_>>>()?;
        tasks.push(SlTask { labels });
    }
    let marginal = DVector::from_element(spec.n_points, 1.0 / spec.n_points as f64);
    SlTaskSet::new(domain.clone(), marginal, tasks, domain, spec.eta, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delta_gives_identical_tasks() {
        let spec = TaskFamilySpec {
            delta: 0.0,
            ..TaskFamilySpec::default()
        };
        let set = generate_mdp_family(&spec, 3).unwrap();
        assert!(set.tasks().iter().all(|t| t == &set.tasks()[0]));
        let sl = generate_sl_family(
            &SlFamilySpec {
                delta: 0.0,
                ..SlFamilySpec::default()
            },
            3,
        )
        .unwrap();
        assert!(sl.tasks().iter().all(|t| t == &sl.tasks()[0]));
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = TaskFamilySpec::default();
        assert_eq!(generate_mdp_family(&spec, 9).unwrap(), generate_mdp_family(&spec, 9).unwrap());
        assert_ne!(generate_mdp_family(&spec, 9).unwrap(), generate_mdp_family(&spec, 10).unwrap());
        let sl = SlFamilySpec::default();
        assert_eq!(generate_sl_family(&sl, 9).unwrap(), generate_sl_family(&sl, 9).unwrap());
    }

    #[test]
    fn generated_instances_respect_bounds() {
        let spec = TaskFamilySpec {
            delta: 0.5,
            gamma_jitter: 0.05,
            ..TaskFamilySpec::default()
        };
        for seed in 0..10 {
            let set = generate_mdp_family(&spec, seed).unwrap();
            for task in set.tasks() {
                assert!(task.transition().iter().all(|p| *p >= spec.eps_mix / spec.n_states as f64 - 1e-15));
                assert!(task.max_abs_reward() <= spec.q_max);
                assert!((task.discount() - 0.9).abs() <= 0.05 + 1e-15);
            }
            assert!(set.features().table().row_iter().all(|r| (r.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn label_means_track_targets() {
        let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let noise = [0.1, 0.3, 0.2, 0.2, 0.2];
        for mean in [-0.6, -0.3, 0.0, 0.17, 0.6] {
            let law = label_law(&grid, mean, &noise).unwrap();
            assert!((law.mean() - mean).abs() < 1e-12, "{mean} vs {}", law.mean());
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        for spec in [
            TaskFamilySpec {
                eps_mix: 0.0,
                ..TaskFamilySpec::default()
            },
            TaskFamilySpec {
                discount: 0.95,
                gamma_jitter: 0.1,
                ..TaskFamilySpec::default()
            },
            TaskFamilySpec {
                n_tasks: 0,
                ..TaskFamilySpec::default()
            },
        ] {
            assert!(generate_mdp_family(&spec, 0).is_err());
        }
    }
}
