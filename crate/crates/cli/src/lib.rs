//! Scenario loading and command orchestration for the `hierpop` tool.

pub mod error;
pub mod run;
pub mod scenario;

pub use error::CliError;
pub use run::{Command, RunOutcome, RunReport, Runner, SCHEMA_VERSION};
pub use scenario::{load_scenario, parse_scenario, Scenario};
