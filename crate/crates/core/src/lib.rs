//! Sequential Nash equilibria of linear-quadratic deep structured games, computed by
//! a coupled Riccati fixed point and recovered by model-based and model-free
//! policy gradient methods.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod game;
pub mod gradient;
pub mod linalg;
pub mod riccati;
pub mod rng;
pub mod sim;
pub mod train;
pub mod zeroth;

pub use config::{ExperimentParams, GameConfig};
pub use error::{Error, Result};
pub use game::{GameSpec, LiftedModel, LiftedVector, Population};
pub use gradient::{CovarianceMatrix, GradientPair};
pub use riccati::{NashSolution, Policy, SolverOptions, ValueMatrix};
pub use train::{Method, StepSize, TerminalStatus, TrainLog, TrainOptions, TrainRecord};
