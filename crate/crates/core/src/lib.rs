//! Estimation and simultaneous inference for high-dimensional linear models
//! with endogenous regressors and many instruments.

pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod rng;
pub mod sensitivity;
pub mod simulation;
pub mod solver;
pub mod stage1;
pub mod stage2;
pub mod stats;

pub use data::{Dataset, GroundTruth, PenaltyConfig};
pub use error::{Error, Result};
pub use solver::{ConvexProgram, ResidualGroup, AbsConstraint, SolverOptions, SolverSolution, SolverStatus};
