use std::io;

use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration failed at tau = {tau}: {reason}")]
    IntegrationFailure { tau: f64, reason: String },

    #[error("eigensolver did not converge in window [{lo}, {hi}] after {iterations} Lanczos steps ({converged}/{wanted} pairs converged)")]
    NonConvergence {
        lo: f64,
        hi: f64,
        iterations: usize,
        converged: usize,
        wanted: usize,
    },

    #[error("factorization of the shifted operator broke down at row {row} (shift {shift})")]
    Factorization { row: usize, shift: f64 },

    #[error("empty state window: {0}")]
    EmptyWindow(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("wavefunction node at (rho = {rho}, z = {z}): |psi| = {amplitude:e}")]
    NodeSingularity { rho: f64, z: f64, amplitude: f64 },

    #[error("rejection sampling acceptance {rate:e} below floor {floor:e}; enlarge or tighten the envelope")]
    LowAcceptance { rate: f64, floor: f64 },

    #[error("{failed} of {total} trajectories failed ({stalled} node-stalled, {underflow} step-underflow)")]
    TrajectoryFailures {
        failed: usize,
        total: usize,
        stalled: usize,
        underflow: usize,
    },

    #[error("spectrum cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
