//! Cooperative driving at an unsignalized intersection with mixed
//! connected-automated and human-driven traffic, coordinated through a
//! weighted potential game.

pub mod agents;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod preference;
pub mod scenario;
pub mod shapley;
pub mod solver;
pub mod utility;

pub use agents::{Archetype, HdvProfile};
pub use config::{validate_config, Ablation, ConfigError, ScenarioConfig};
pub use engine::{run_trial, TrialLog, TrialStatus};
pub use metrics::{aggregate, evaluate, BatchSummary, TrialOutcome};
pub use scenario::{Scenario, VehicleKind, VehicleState};
pub use solver::{solve, SolveResult, SolveStatus, SolverOptions};
pub use utility::{ActionProfile, Game, Preference, UtilityParams};
