//! Self-triggered distributed model predictive control with an adaptive
//! prediction horizon for disturbed nonlinear multi-agent systems.
//!
//! Each agent solves its optimal control problem only at trigger instants,
//! applies the open-loop plan in between, shrinks its horizon as the plan
//! reaches the terminal set, and switches to a local feedback once inside the
//! terminal region. Neighbours exchange their latest plan at trigger instants.

pub mod bounds;
pub mod error;
pub mod linalg;
pub mod model;
pub mod neighbors;
pub mod ocp;
pub mod report;
pub mod sampling;
pub mod scenario;
pub mod sim;
pub mod solver;
pub mod trigger;

pub type AgentId = usize;

pub use error::{Error, Result};
pub use linalg::BoxSet;
pub use model::{AgentModel, Dynamics, LinearDynamics, TerminalIngredients, Unicycle};
pub use scenario::{Scenario, ScenarioConfig};
pub use sim::{run_variant, RunLog, SimOptions, Variant};
