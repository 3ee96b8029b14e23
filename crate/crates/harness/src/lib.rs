//! Scenario files, the run engine, gain sweeps, the pacemaker experiment and
//! result output for `blendnet-core` networks.

// NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod model;
pub mod output;
pub mod pacemaker;
pub mod plot;
pub mod run;
pub mod sweep;
pub mod verify;

pub use config::ScenarioConfig;
pub use error::{HarnessError, Result};
pub use output::run_scenario;
pub use pacemaker::{pacemaker_experiment, PacemakerConfig, PacemakerReport};
pub use plot::emit_plots;
pub use run::{run, RunOutput, Summary};
pub use sweep::{sweep_gain, SweepRow};
pub use verify::{verify, VerifyReport};
