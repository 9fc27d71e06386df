//! Online bipartite matching on sparse stochastic block models.
//!
//! The crate simulates the arrival process under four class-selection
//! policies (Myopic, Balance, RealBalance, LearnedBalance), computes the
//! corresponding fluid limits and runs the multi-seed experiments that
//! compare the two.

pub mod engine;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod fluid_balance;
pub mod fluid_myopic;
pub mod io;
pub mod model;
pub mod numerics;
pub mod policies;
pub mod transport;

pub use engine::{run, step, Backend, MatchOutcome, SimState, Trajectory};
pub use error::{Error, Result};
pub use estimator::{CountsTable, EstimateReport};
pub use fluid_balance::PhaseSchedule;
pub use fluid_myopic::MyopicFluid;
pub use model::{ModelParams, OfflineMode};
pub use policies::{Choice, Policy};
pub use transport::QPlan;
