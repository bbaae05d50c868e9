use nalgebra::DMatrix;
use thiserror::Error;

use crate::adaptive::Trajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("refusing to densify a {n}x{n} product (limit {limit})")]
    RefusedDense { n: usize, limit: usize },

    /// The exponential action did not reach the requested tolerance. Carries
    /// the last (finest) iterate and its relative difference estimate.
    #[error("exponential action missed tolerance: estimate {estimate:e} > {rel_tol:e}")]
    ToleranceNotMet {
        best: Box<DMatrix<f64>>,
        estimate: f64,
        rel_tol: f64,
    },

    #[error("step too large for the nonlinear subflow (h = {h:e}, condition estimate {condition:e})")]
    StepTooLarge { h: f64, condition: f64 },

    #[error("quadrature nodes are (nearly) coincident: {0}")]
    InvalidNodes(String),

    #[error("scheme with {stages} stage(s) has no embedded method")]
    NoEmbeddedMethod { stages: usize },

    #[error("step size collapsed to {h:e} at t = {t:e}")]
    StepSizeCollapse {
        t: f64,
        h: f64,
        partial: Box<Trajectory>,
    },

    #[error("dense reference diverged at step {step} (try more steps or a shorter horizon)")]
    OracleDiverged { step: usize },

    #[error("reference matrix has zero norm")]
    InvalidReference,

    #[error("step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, index: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                index,
                source: Box::new(e),
            },
        }
    }

    /// Strips any step-index wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }
}
