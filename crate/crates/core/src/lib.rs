//! Probabilistic state estimation for steady-state district heating grids.
//!
//! The crate models a heating network as a graph with thermal and hydraulic
//! steady-state equations, solves the resulting nonlinear system with a
//! presolver-seeded damped Newton method, trains a fully connected network to
//! stand in for the solver, and estimates full posterior distributions over
//! all grid states from noisy partial measurements with SIR, random-walk
//! Metropolis, and Hamiltonian MCMC samplers, alongside a linearised Gaussian
//! baseline. Everything is seeded and reproducible.

pub mod dynamics;
pub mod error;
pub mod grid;
pub mod inference;
pub mod lse;
pub mod metrics;
pub mod solver;
pub mod surrogate;
pub(crate) mod util;

pub use error::{InferenceError, SolveError, TopologyError, TrainError};
pub use grid::{GridState, GridTopology, HeatExchangeVector};
pub use inference::SampleSet;
pub use solver::{SolveReport, SolverConfig};
pub use surrogate::SurrogateNet;
