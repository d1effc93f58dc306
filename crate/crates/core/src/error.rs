use thiserror::Error;

use crate::network::Violation;

pub type GridResult<T> = Result<T, GridError>;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("branch {branch} has zero series impedance")]
    ZeroImpedanceBranch { branch: usize },

    #[error("invalid network: {}", format_violations(.0))]
    InvalidNetwork(Vec<Violation>),

    #[error("Newton-Raphson did not converge after {iterations} iterations (max mismatch {mismatch:.3e} pu)")]
    NotConverged { iterations: usize, mismatch: f64 },

    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },

    #[error("no feasible {k}-branch contingency found after {attempts} attempts")]
    NoFeasibleContingency { k: usize, attempts: usize },

    #[error("scenario generation stalled at index {index}: {discarded} of {attempts} attempts discarded")]
    GenerationStalled {
        index: usize,
        discarded: usize,
        attempts: usize,
    },

    #[error("scenario solution has not converged")]
    UnsolvedScenario,

    #[error("bus {bus} cannot reach a slack bus")]
    DisconnectedBus { bus: usize },

    #[error("standardizer needs at least one training graph")]
    EmptyTrainingSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}
