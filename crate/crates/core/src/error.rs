//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology file could not be parsed: {0}")]
    Parse(String),
    #[error("topology is invalid:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("singular Jacobian near equation `{equation}`")]
    SingularJacobian { equation: String },
    #[error("solver did not converge: psi = {psi:.3e} after {iterations} iterations")]
    NotConverged { psi: f64, iterations: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty or split sizes exceed the dataset")]
    BadSplit,
    #[error("training loss diverged at epoch {epoch}; last finite train/val loss: {train_loss:.6e}/{val_loss:.6e}")]
    Diverged {
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
    },
    #[error("dataset generation aborted: {redraws} redraws over {samples} samples exceeds 1%")]
    TooManyRedraws { redraws: usize, samples: usize },
    #[error("model file error: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("prior covariance is not positive semi-definite")]
    BadCovariance,
    #[error("rejection acceptance below {floor:e} after {attempts} attempts; review the prior")]
    RejectionFloor { floor: f64, attempts: usize },
    #[error("measured state `{0}` is not a free state of this topology")]
    BadMeasurement(String),
    #[error("all of the first {0} proposals were rejected; the step size is pathologically large")]
    StuckChain(usize),
    #[error("log-posterior at the initial point is not finite")]
    BadStart,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("file format error: {0}")]
    Format(String),
}
