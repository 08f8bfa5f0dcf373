use thiserror::Error;

use crate::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model evaluation produced a non-finite value: {0}")]
    ModelEvaluation(String),

    #[error("terminal synthesis failed: {0}")]
    Synthesis(String),

    #[error("no terminal radius passes the terminal-region checks: {0}")]
    InfeasibleTerminal(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("tightened state set is empty at step {step}")]
    TighteningInfeasible { step: usize },

    #[error("agent state management error: {0}")]
    StateManagement(String),

    #[error("stale package from agent {sender}: {detail}")]
    PackageStaleness { sender: AgentId, detail: String },

    #[error("optimal control problem infeasible for agent {agent} at step {step}: {detail}")]
    Infeasible {
        agent: AgentId,
        step: usize,
        detail: String,
    },

    #[error("failed to load scenario at `{path}`: {message}")]
    Load { path: String, message: String },

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
