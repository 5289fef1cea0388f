//! Leader-following output consensus for heterogeneous nonlinear agents.
//!
//! Each agent runs a distributed dynamic compensator that reconstructs the
//! leader's state from neighbors' scalar outputs, and an adaptive
//! backstepping controller that tracks the compensator's output estimate.
//!
//! - [`expr`]: regressor expressions (parse, evaluate, differentiate)
//! - [`graph`]: communication digraph, `H` and the augmented `Ĥ`
//! - [`gain`]: Riccati solve, gain `K = μ P0 Cᵀ`, Hurwitz certification
//! - [`compensator`]: per-agent compensator dynamics
//! - [`controller`]: backstepping with tuning functions, Nussbaum variant
//! - [`sim`]: closed-loop RK4 integration, logs, metrics, probes
//! - [`random`]: seeded scenario generators

pub mod compensator;
pub mod controller;
pub mod expr;
pub mod gain;
pub mod graph;
pub mod jet;
pub mod linalg;
pub mod random;
pub mod sim;

pub use compensator::{Compensator, CompensatorError, CompensatorState, NeighborOutputs};
pub use controller::{AgentModel, BackstepController, BackstepTrace, ControllerError, ControllerState, Direction};
pub use expr::{Expr, ExprError};
pub use gain::{GainDesign, GainError, LeaderModel, MuChoice};
pub use graph::{AugmentedSpec, DiGraph, Edge, GraphError};
pub use sim::{AgentSetup, ClosedLoop, Integration, Metrics, Scenario, SimError, TrajectoryLog};
