//! Scenario files and the `dcomp` commands.

pub mod commands;
pub mod scenario_file;

pub use commands::CliError;
pub use scenario_file::{load_str, save_string, LoadError, ScenarioFile};

/// The five-agent reproduction scenario. Its graph is a stand-in chain
/// `0 → 1 → 2 → 3 → 4 → 5` with unit weights.
pub const PAPER_SCENARIO: &str = include_str!("../scenarios/paper.scenario");
