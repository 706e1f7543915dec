//! Federated learning simulation: local models, adversaries, the round
//! engine and its traces.

pub mod engine;
pub mod malicious;
pub mod model;
pub mod orchestrator;
pub mod trace;

pub use engine::{run_scenario, ScenarioRun};
pub use trace::{summarize, summarize_run, ClientTrace, RoundTrace, RunSummary, SummaryRow};
