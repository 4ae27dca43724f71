//! Deterministic discrete-event simulation of market-oriented cloud
//! computing: priced resources, a deadline-and-budget constrained broker,
//! deadline-driven cloud provisioning, and a posted-price exchange with SLAs.

pub mod broker;
pub mod engine;
pub mod infra;
pub mod market;
pub mod rng;
pub mod time;
pub mod workload;

pub use time::SimTime;
pub mod report;
pub mod run;
pub mod scenario;

pub use report::{Format, SimReport};
pub use run::{run, run_logged, RunError, RunOptions, RunOutput};
pub use scenario::{load_scenario, Scenario, ScenarioError};
