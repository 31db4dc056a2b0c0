//! Experiment pipelines: one function per CLI mode, each returning typed CSV
//! rows. Seeds run in parallel and are collected in seed order.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Mode, Parameterization};
use crate::harness::generate::{generate_mdp_family, generate_sl_family, random_domain};
use crate::harness::gradcheck::{finite_diff_gradient, relative_error};
use crate::meta_rl::{run_meta_rl, MetaRlTaskSet};
use crate::meta_sl::{run_meta_sl, SlTaskSet};
use crate::neural::{adversarial_perturbations, init_symmetric, linearization_error, NeuralModel};
use crate::rl_audit::{audit_linear_rl_gap, audit_neural_rl_gap, best_found_optimum, BoundReport};
use crate::sl_audit::{
    audit_linear_sl_gap, audit_linear_sl_squared, audit_neural_sl_gap, best_found_sl_optimum, linear_sl_optimum,
    SlBoundReport,
};
use crate::train::TrainState;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "METALAB_THREADS";

/// Salts separating the random streams drawn from one seed.
const NET_SALT: u64 = 1;
const POINT_SALT: u64 = 2;

/// Independent stream for `salt` under `seed`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One outer-loop iterate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub seed: u64,
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    /// Smallest gradient norm seen up to this iterate.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRlRow {
    pub seed: u64,
    pub lhs: f64,
    pub epsilon: f64,
    pub radius: f64,
    pub c0: f64,
    #[serde(rename = "const")]
    pub constant: f64,
    pub approx_error: f64,
    pub rhs: f64,
    pub holds: bool,
    pub degenerate_points: usize,
    pub linearization_proxy: Option<f64>,
    pub measured_linearization: Option<f64>,
}

impl AuditRlRow {
    fn new(seed: u64, r: &BoundReport) -> Self {
        Self {
            seed,
            lhs: r.lhs,
            epsilon: r.epsilon,
            radius: r.radius,
            c0: r.c0,
            constant: r.constant,
            approx_error: r.approx_error,
            rhs: r.rhs,
            holds: r.holds,
            degenerate_points: r.degenerate_points,
            linearization_proxy: r.linearization_proxy,
            measured_linearization: r.measured_linearization,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSlRow {
    pub seed: u64,
    pub audit: &'static str,
    pub lhs: f64,
    pub epsilon: f64,
    pub radius: f64,
    pub term_i: f64,
    pub term_ii: f64,
    pub term_iii: f64,
    pub extra: f64,
    pub rhs: f64,
    pub holds: bool,
    pub degenerate_points: usize,
    pub linearization_proxy: Option<f64>,
    pub measured_linearization: Option<f64>,
}

impl AuditSlRow {
    fn new(seed: u64, r: &SlBoundReport) -> Self {
        Self {
            seed,
            audit: r.audit.label(),
            lhs: r.lhs,
            epsilon: r.epsilon,
            radius: r.radius,
            term_i: r.term_i,
            term_ii: r.term_ii,
            term_iii: r.term_iii,
            extra: r.extra,
            rhs: r.rhs,
            holds: r.holds,
            degenerate_points: r.degenerate_points,
            linearization_proxy: r.linearization_proxy,
            measured_linearization: r.measured_linearization,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinerrRow {
    pub m: usize,
    pub seed: u64,
    pub linearization_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub seed: u64,
    pub problem: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Rendered result of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub csv: Vec<u8>,
    /// One-line human-readable summary.
    pub summary: String,
    /// An audit inequality or gradient check failed.
    pub violation: bool,
}

/// Thread pool sized by `METALAB_THREADS` (all cores when unset or zero).
fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs `job` for every item on the configured pool, preserving order.
fn par_map<T: Sync, R: Send>(items: &[T], job: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    thread_pool()?.install(|| items.par_iter().map(&job).collect())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, base_dir: &Path) -> Result<T> {
    let path = if path.is_absolute() { path.to_path_buf() } else { base_dir.join(path) };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read task set {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Task set for `seed`: the configured file when present, else the generator.
pub fn rl_task_set(config: &ExperimentConfig, base_dir: &Path, seed: u64) -> Result<MetaRlTaskSet> {
    match &config.task_set {
        Some(path) => read_json(path, base_dir),
        None => generate_mdp_family(&config.mdp_family(), seed),
    }
}

pub fn sl_task_set(config: &ExperimentConfig, base_dir: &Path, seed: u64) -> Result<SlTaskSet> {
    match &config.task_set {
        Some(path) => read_json(path, base_dir),
        None => generate_sl_family(&config.sl_family(), seed),
    }
}

fn train_rows(seed: u64, state: &TrainState) -> Vec<TrainRow> {
    let mut best = f64::INFINITY;
    state
        .objective_history
        .iter()
        .zip(&state.grad_norm_history)
        .enumerate()
        .map(|(iteration, (&objective, &grad_norm))| {
            best = best.min(grad_norm);
            TrainRow {
                seed,
                iteration,
                objective,
                grad_norm,
                epsilon: best,
            }
        })
        .collect()
}

pub fn train_rl(config: &ExperimentConfig, base_dir: &Path) -> Result<Vec<TrainRow>> {
    let per_seed = par_map(&config.seeds(), |&seed| {
        let set = rl_task_set(config, base_dir, seed)?;
        let state = match config.parameterization {
            Parameterization::Linear => run_meta_rl(
                &set.problem(),
                DVector::zeros(set.features().dim()),
                config.step_schedule(),
                config.iterations,
            )?,
            Parameterization::Neural => {
                let model = rl_network(config, &set, seed)?;
                run_meta_rl(
                    &set.problem_with(&model),
                    model.net().w_init().clone(),
                    config.step_schedule(),
                    config.iterations,
                )?
            }
        };
        Ok(train_rows(seed, &state))
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn train_sl(config: &ExperimentConfig, base_dir: &Path) -> Result<Vec<TrainRow>> {
    let per_seed = par_map(&config.seeds(), |&seed| {
        let set = sl_task_set(config, base_dir, seed)?;
        let state = match config.parameterization {
            Parameterization::Linear => {
                let model = set.linear_model();
                run_meta_sl(
                    &set.linear_problem(&model),
                    DVector::zeros(set.features().ncols()),
                    config.step_schedule(),
                    config.iterations,
                )?
            }
            Parameterization::Neural => {
                let model = sl_network(config, &set, seed)?;
                run_meta_sl(
                    &set.problem_with(&model),
                    model.net().w_init().clone(),
                    config.step_schedule(),
                    config.iterations,
                )?
            }
        };
        Ok(train_rows(seed, &state))
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn rl_network(config: &ExperimentConfig, set: &MetaRlTaskSet, seed: u64) -> Result<NeuralModel> {
    let net = init_symmetric(config.m, set.features().dim(), derive_seed(seed, NET_SALT))?;
    NeuralModel::for_pairs(net, set.features())
}

fn sl_network(config: &ExperimentConfig, set: &SlTaskSet, seed: u64) -> Result<NeuralModel> {
    let net = init_symmetric(config.m, set.domain().ncols(), derive_seed(seed, NET_SALT))?;
    NeuralModel::for_domain(net, set.domain())
}

/// Meta-RL audit for one seed: `ω` from gradient ascent, `θ*` from the
/// multi-start oracle with `ω` as an extra start.
pub fn audit_rl_seed(config: &ExperimentConfig, set: &MetaRlTaskSet, seed: u64) -> Result<BoundReport> {
    match config.parameterization {
        Parameterization::Linear => {
            let problem = set.problem();
            let zero = DVector::zeros(set.features().dim());
            let omega = run_meta_rl(&problem, zero.clone(), config.step_schedule(), config.iterations)?.theta;
            let star = best_found_optimum(&problem, &zero, &[omega.clone()], &config.oracle, seed)?;
            audit_linear_rl_gap(set, &omega, &star.theta, config.radius)
        }
        Parameterization::Neural => {
            let model = rl_network(config, set, seed)?;
            let problem = set.problem_with(&model);
            let w_init = model.net().w_init().clone();
            let state = run_meta_rl(&problem, w_init.clone(), config.step_schedule(), config.iterations)?;
            let star = best_found_optimum(&problem, &w_init, &[state.theta.clone()], &config.oracle, seed)?;
            audit_neural_rl_gap(set, &model, &state.theta, &star.theta, state.max_displacement)
        }
    }
}

pub fn audit_rl(config: &ExperimentConfig, base_dir: &Path) -> Result<Vec<AuditRlRow>> {
    par_map(&config.seeds(), |&seed| {
        let set = rl_task_set(config, base_dir, seed)?;
        Ok(AuditRlRow::new(seed, &audit_rl_seed(config, &set, seed)?))
    })
}

/// Meta-SL audits for one seed: triple-indexed and squared-loss reports for
/// linear models, the network report otherwise.
pub fn audit_sl_seed(config: &ExperimentConfig, set: &SlTaskSet, seed: u64) -> Result<Vec<SlBoundReport>> {
    match config.parameterization {
        Parameterization::Linear => {
            let model = set.linear_model();
            let problem = set.linear_problem(&model);
            let zero = DVector::zeros(set.features().ncols());
            let omega = run_meta_sl(&problem, zero, config.step_schedule(), config.iterations)?.theta;
            let star = linear_sl_optimum(set, &[omega.clone()], &config.oracle, seed)?;
            Ok(vec![
                audit_linear_sl_gap(set, &omega, &star.theta, config.radius)?,
                audit_linear_sl_squared(set, &omega, &star.theta, config.radius)?,
            ])
        }
        Parameterization::Neural => {
            let model = sl_network(config, set, seed)?;
            let problem = set.problem_with(&model);
            let w_init = model.net().w_init().clone();
            let state = run_meta_sl(&problem, w_init.clone(), config.step_schedule(), config.iterations)?;
            let star = best_found_sl_optimum(&problem, &w_init, &[state.theta.clone()], &config.oracle, seed)?;
            Ok(vec![audit_neural_sl_gap(
                set,
                &model,
                &state.theta,
                &star.theta,
                state.max_displacement,
            )?])
        }
    }
}

pub fn audit_sl(config: &ExperimentConfig, base_dir: &Path) -> Result<Vec<AuditSlRow>> {
    let per_seed = par_map(&config.seeds(), |&seed| {
        let set = sl_task_set(config, base_dir, seed)?;
        Ok(audit_sl_seed(config, &set, seed)?
            .iter()
            .map(|r| AuditSlRow::new(seed, r))
            .collect::<Vec<_>>())
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Worst-case linearization error at width `m`: uniform measure on a random
/// domain, perturbations of norm `linerr_radius` aimed at its first point.
pub fn linearization_at(config: &ExperimentConfig, m: usize, seed: u64) -> Result<f64> {
    let domain = random_domain(config.domain_size, config.d, derive_seed(seed, POINT_SALT))?;
    let net = init_symmetric(m, config.d, derive_seed(seed, NET_SALT))?;
    let x_star: Vec<f64> = domain.row(0).iter().copied().collect();
    let [w0, w1, w2] = adversarial_perturbations(&net, &x_star, config.linerr_radius)?;
    let measure = DVector::from_element(domain.nrows(), 1.0 / domain.nrows() as f64);
    Ok(linearization_error(&net, &w0, &w1, &w2, &domain, &measure, config.linerr_radius)?.value)
}

pub fn nn_linerr(config: &ExperimentConfig) -> Result<Vec<LinerrRow>> {
    let jobs: Vec<(usize, u64)> = config
        .widths
        .iter()
        .flat_map(|&m| config.seeds().into_iter().map(move |s| (m, s)))
        .collect();
    par_map(&jobs, |&(m, seed)| {
        Ok(LinerrRow {
            m,
            seed,
            linearization_error: linearization_at(config, m, seed)?,
        })
    })
}

/// Least-squares slope of `log(mean error)` against `log m`.
pub fn linerr_slope(rows: &[LinerrRow]) -> Result<f64> {
    let mut widths: Vec<usize> = rows.iter().map(|r| r.m).collect();
    widths.sort_unstable();
    widths.dedup();
    if widths.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two widths".into()));
    }
    let points: Vec<(f64, f64)> = widths
        .iter()
        .map(|&m| {
            let errs: Vec<f64> = rows.iter().filter(|r| r.m == m).map(|r| r.linearization_error).collect();
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            ((m as f64).ln(), mean.ln())
        })
        .collect();
    if points.iter().any(|(_, y)| !y.is_finite()) {
        return Err(Error::NonFinite("mean linearization error must be positive".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

fn gaussian_point(len: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(len, |_, _| StandardNormal.sample(&mut rng))
}

fn check(
    seed: u64,
    problem: &'static str,
    analytic: &DVector<f64>,
    numeric: &DVector<f64>,
    tol: f64,
) -> GradcheckRow {
    let max_rel_error = relative_error(analytic, numeric);
    GradcheckRow {
        seed,
        problem,
        max_rel_error,
        passed: max_rel_error <= tol,
    }
}

/// Analytic meta-gradients against central differences at a Gaussian point,
/// on the generated meta-RL and meta-SL families.
pub fn gradcheck_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<GradcheckRow>> {
    let (h, tol) = (config.gradcheck_step, config.gradcheck_tol);
    let point_seed = derive_seed(seed, POINT_SALT);
    let mut rows = Vec::new();
    match config.parameterization {
        Parameterization::Linear => {
            let set = generate_mdp_family(&config.mdp_family(), seed)?;
            let problem = set.problem();
            let theta = gaussian_point(set.features().dim(), point_seed);
            let numeric = finite_diff_gradient(|t| problem.objective(t), &theta, h)?;
            rows.push(check(seed, "meta_rl_direct", &problem.gradient_direct(&theta)?, &numeric, tol));
            rows.push(check(seed, "meta_rl_refined", &problem.gradient_refined(&theta)?, &numeric, tol));

            let set = generate_sl_family(&config.sl_family(), seed)?;
            let model = set.linear_model();
            let problem = set.linear_problem(&model);
            let theta = gaussian_point(set.features().ncols(), point_seed);
            let numeric = finite_diff_gradient(|t| problem.objective(t), &theta, h)?;
            rows.push(check(seed, "meta_sl_linear", &problem.gradient(&theta)?, &numeric, tol));
        }
        Parameterization::Neural => {
            let set = generate_mdp_family(&config.mdp_family(), seed)?;
            let model = rl_network(config, &set, seed)?;
            let problem = set.problem_with(&model);
            let theta = model.net().w_init() + gaussian_point(model.net().n_params(), point_seed) * 0.1;
            let numeric = finite_diff_gradient(|t| problem.objective(t), &theta, h)?;
            rows.push(check(seed, "meta_rl_neural", &problem.gradient_direct(&theta)?, &numeric, tol));

            let set = generate_sl_family(&config.sl_family(), seed)?;
            let model = sl_network(config, &set, seed)?;
            let problem = set.problem_with(&model);
            let theta = model.net().w_init() + gaussian_point(model.net().n_params(), point_seed) * 0.1;
            let numeric = finite_diff_gradient(|t| problem.objective(t), &theta, h)?;
            rows.push(check(seed, "meta_sl_neural", &problem.gradient(&theta)?, &numeric, tol));
        }
    }
    Ok(rows)
}

pub fn gradcheck(config: &ExperimentConfig) -> Result<Vec<GradcheckRow>> {
    let per_seed = par_map(&config.seeds(), |&seed| gradcheck_seed(config, seed))?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn header_only(columns: &[&str]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(columns)?;
    writer
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Runs `mode` and renders its CSV; `base_dir` resolves relative task-set paths.
pub fn run_experiment(mode: Mode, config: &ExperimentConfig, base_dir: &Path) -> Result<ExperimentOutput> {
    config.validate()?;
    let name = mode.name();
    match mode {
        Mode::TrainRl | Mode::TrainSl => {
            let rows = if mode == Mode::TrainRl {
                train_rl(config, base_dir)?
            } else {
                train_sl(config, base_dir)?
            };
            let finals: Vec<&TrainRow> = config
                .seeds()
                .iter()
                .filter_map(|s| rows.iter().rev().find(|r| r.seed == *s))
                .collect();
            let worst = finals.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
            Ok(ExperimentOutput {
                csv: to_csv(&rows)?,
                summary: format!("{name}: {} seeds, final gradient norm at most {worst:.3e}", finals.len()),
                violation: false,
            })
        }
        Mode::AuditRl => {
            let rows = audit_rl(config, base_dir)?;
            let held = rows.iter().filter(|r| r.holds).count();
            Ok(ExperimentOutput {
                csv: to_csv(&rows)?,
                summary: format!("{name}: bound holds on {held}/{} seeds", rows.len()),
                violation: held < rows.len(),
            })
        }
        Mode::AuditSl => {
            let rows = audit_sl(config, base_dir)?;
            let held = rows.iter().filter(|r| r.holds).count();
            Ok(ExperimentOutput {
                csv: to_csv(&rows)?,
                summary: format!("{name}: bound holds on {held}/{} audits", rows.len()),
                violation: held < rows.len(),
            })
        }
        Mode::NnLinerr => {
            let rows = nn_linerr(config)?;
            let summary = match linerr_slope(&rows) {
                Ok(slope) => format!("{name}: log-log slope {slope:.4} over widths {:?}", config.widths),
                Err(e) => format!("{name}: no slope ({e})"),
            };
            let csv = if rows.is_empty() {
                header_only(&["m", "seed", "linearization_error"])?
            } else {
                to_csv(&rows)?
            };
            Ok(ExperimentOutput {
                csv,
                summary,
                violation: false,
            })
        }
        Mode::Gradcheck => {
            let rows = gradcheck(config)?;
            let passed = rows.iter().filter(|r| r.passed).count();
            let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            Ok(ExperimentOutput {
                csv: to_csv(&rows)?,
                summary: format!(
                    "{name}: {passed}/{} checks pass, worst relative error {worst:.3e}",
                    rows.len()
                ),
                violation: passed < rows.len(),
            })
        }
    }
}
