//! Task-family generators, finite-difference oracles, experiment
//! configuration, and the `metalab` command-line front end.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod generate;
pub mod gradcheck;

pub use cli::run_cli;
pub use config::{ExperimentConfig, Mode, Parameterization};
pub use experiments::{run_experiment, ExperimentOutput};
pub use generate::{generate_mdp_family, generate_sl_family, SlFamilySpec, TaskFamilySpec};
pub use gradcheck::{finite_diff_gradient, relative_error};
