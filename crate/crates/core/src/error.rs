use thiserror::Error;

use crate::mdp::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state space has {size} states, above the cap of {cap}")]
    StateSpaceTooLarge { size: u128, cap: usize },

    #[error("invalid state variable: {0}")]
    InvalidVariable(String),

    #[error("unknown state variable `{0}`")]
    UnknownVariable(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("cannot compose state: {0}")]
    Compose(String),

    #[error("mdp failed validation with {} violation(s)", .0.violations.len())]
    InvalidMdp(ValidationReport),

    #[error("invalid option `{name}`: {reason}")]
    InvalidOption { name: String, reason: String },

    #[error("options `{0}` and `{1}` both control variable `{2}`")]
    Incoherent(String, String, String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("truncation error {error:e} exceeds tolerance {tol:e} at k_max = {k_max}")]
    Truncation { error: f64, tol: f64, k_max: usize },

    #[error("k must be at least 1")]
    ZeroHorizon,

    #[error("option `{option}` has no policy at state {state}")]
    NoPolicy { option: String, state: usize },

    #[error("rollout exceeded the step cap of {0}")]
    StepCap(usize),

    #[error("no actions available at non-terminal state {0}")]
    NoActions(usize),

    #[error("did not converge after {iterations} iterations (last change {delta:e})")]
    NotConverged { iterations: usize, delta: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid layout: {0}")]
    Layout(String),
}
