//! Experiment configuration parsed strictly from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::generate::{SlFamilySpec, TaskFamilySpec};
use crate::train::{OracleSettings, StepSchedule};

/// Experiment pipeline selected by the CLI subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainRl,
    TrainSl,
    AuditRl,
    AuditSl,
    NnLinerr,
    Gradcheck,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::TrainRl => "train-rl",
            Mode::TrainSl => "train-sl",
            Mode::AuditRl => "audit-rl",
            Mode::AuditSl => "audit-sl",
            Mode::NnLinerr => "nn-linerr",
            Mode::Gradcheck => "gradcheck",
        }
    }
}

/// Energy or hypothesis class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Linear,
    /// Two-layer ReLU network of width `m` on the linear features.
    Neural,
}

/// Step-size schedule kind; the base step is `alpha`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    InverseSqrt,
}

/// Every knob of an experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task-set JSON used instead of the generator; relative to the config file.
    pub task_set: Option<PathBuf>,
    pub parameterization: Parameterization,
    /// Base seed; seed `j` of a run is `seed + j`.
    pub seed: u64,
    pub n_seeds: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_tasks: usize,
    /// Feature and input dimension.
    pub d: usize,
    /// Network width.
    pub m: usize,
    pub discount: f64,
    pub gamma_jitter: f64,
    pub eps_mix: f64,
    /// Task perturbation scale.
    pub delta: f64,
    pub q_max: f64,
    pub y_max: f64,
    /// Number of meta-SL domain points.
    pub domain_size: usize,
    pub tau: f64,
    pub eta: f64,
    pub alpha: f64,
    pub schedule: ScheduleKind,
    /// Outer-loop iterations `T`.
    pub iterations: usize,
    /// Audit radius `R` for linear parameterizations.
    pub radius: f64,
    pub oracle: OracleSettings,
    /// Widths swept by `nn-linerr`.
    pub widths: Vec<usize>,
    /// Perturbation radius used by `nn-linerr`.
    pub linerr_radius: f64,
    pub gradcheck_step: f64,
    pub gradcheck_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task_set: None,
            parameterization: Parameterization::Linear,
            seed: 0,
            n_seeds: 1,
            n_states: 6,
            n_actions: 3,
            n_tasks: 4,
            d: 8,
            m: 256,
            discount: 0.9,
            gamma_jitter: 0.0,
            eps_mix: 0.05,
            delta: 0.1,
            q_max: 1.0,
            y_max: 1.0,
            domain_size: 20,
            tau: 1.0,
            eta: 0.1,
            alpha: 1e-3,
            schedule: ScheduleKind::Constant,
            iterations: 500,
            radius: 10.0,
            oracle: OracleSettings::default(),
            widths: vec![64, 256, 1024, 4096],
            linerr_radius: 1.0,
            gradcheck_step: 1e-6,
            gradcheck_tol: 1e-4,
        }
    }
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {value}")))
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_seeds", self.n_seeds),
            ("n_states", self.n_states),
            ("n_actions", self.n_actions),
            ("n_tasks", self.n_tasks),
            ("d", self.d),
            ("m", self.m),
            ("domain_size", self.domain_size),
            ("iterations", self.iterations),
            ("oracle.starts", self.oracle.starts),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if let Some(w) = std::iter::once(&self.m).chain(&self.widths).find(|w| **w < 2 || **w % 2 != 0) {
            return Err(Error::Config(format!("network width {w} must be even and at least 2")));
        }
        if !(self.eps_mix > 0.0 && self.eps_mix < 1.0) {
            return Err(Error::Config(format!("eps_mix {} must lie in (0, 1)", self.eps_mix)));
        }
        let (lo, hi) = (self.discount - self.gamma_jitter, self.discount + self.gamma_jitter);
        if !(self.gamma_jitter >= 0.0 && lo > 0.0 && hi < 1.0) {
            return Err(Error::Config(format!("discount range [{lo}, {hi}] must lie inside (0, 1)")));
        }
        for (name, value) in [
            ("q_max", self.q_max),
            ("y_max", self.y_max),
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("linerr_radius", self.linerr_radius),
            ("gradcheck_step", self.gradcheck_step),
            ("gradcheck_tol", self.gradcheck_tol),
            ("oracle.initial_step", self.oracle.initial_step),
        ] {
            positive(name, value)?;
        }
        for (name, value) in [
            ("eta", self.eta),
            ("delta", self.delta),
            ("radius", self.radius),
            ("oracle.init_scale", self.oracle.init_scale),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be ≥ 0, got {value}")));
            }
        }
        Ok(())
    }

    /// Seeds of the run, in output order.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|j| self.seed.wrapping_add(j)).collect()
    }

    pub fn step_schedule(&self) -> StepSchedule {
        match self.schedule {
            ScheduleKind::Constant => StepSchedule::Constant { alpha: self.alpha },
            ScheduleKind::InverseSqrt => StepSchedule::InverseSqrt { alpha: self.alpha },
        }
    }

    pub fn mdp_family(&self) -> TaskFamilySpec {
        TaskFamilySpec {
            n_states: self.n_states,
            n_actions: self.n_actions,
            n_tasks: self.n_tasks,
            d: self.d,
            discount: self.discount,
            gamma_jitter: self.gamma_jitter,
            eps_mix: self.eps_mix,
            delta: self.delta,
            q_max: self.q_max,
            temperature: self.tau,
            eta: self.eta,
        }
    }

    pub fn sl_family(&self) -> SlFamilySpec {
        SlFamilySpec {
            n_points: self.domain_size,
            d: self.d,
            n_tasks: self.n_tasks,
            delta: self.delta,
            y_max: self.y_max,
            eta: self.eta,
        }
    }
}
