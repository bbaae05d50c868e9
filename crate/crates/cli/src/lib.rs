//! Front end for `dresplit`: problem files, run configuration, studies and
//! oracle validation.

pub mod config;
pub mod matrixmarket;
pub mod problem;
pub mod study;
pub mod validation;
