//! Low-rank splitting solvers for differential Riccati equations
//!
//! ```text
//! Ṗ = AᵀP + PA + Q - PSP,   P(0) = P₀
//! ```
//!
//! with `P` kept in factored form `L D Lᵀ`.

pub mod adaptive;
pub mod error;
pub mod expaction;
pub mod lowrank;
pub mod oracle;
pub mod schemes;
pub mod subflows;

pub use adaptive::{
    integrate_adaptive, integrate_fixed, ControllerParams, SolverOptions, StepRecord, StoreFactors,
    Trajectory,
};
pub use error::{Error, Result};
pub use expaction::{exp_action, ExpActionOptions, StiffOperator};
pub use lowrank::{combine, compress, frob_norm, to_dense, CompressionOptions, LdltFactor};
pub use schemes::{SchemeKind, SchemeSpec};
pub use subflows::{FlowOptions, NodePolicy, ProblemData, QuadraticOperator};
