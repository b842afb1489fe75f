//! Priors, likelihood, and the stochastic state estimators.

mod hmc;
mod likelihood;
mod mh;
mod prior;
mod sample_set;
mod sir;

pub use hmc::{hmc_chains, HmcConfig};
pub use likelihood::{
    grad_log_likelihood_state, load_measurements, log_likelihood, Measurement,
    MeasurementEntryDoc, MeasurementSpec,
};
pub use mh::{mh_chain, MhConfig};
pub use prior::{PriorDoc, TruncatedNormalPrior};
pub use sample_set::{SampleProvenance, SampleSet};
pub use sir::{sir_mc, SirConfig};

use crate::error::InferenceError;
use crate::grid::{GridState, GridTopology, HeatExchangeVector};
use crate::solver::{solve, SolverConfig};
use nalgebra::DVector;

/// The map from heat exchanges to full grid states that a sampler evaluates.
/// Implemented by the exact solver and by the trained surrogate, and by small
/// analytic stand-ins in tests.
pub trait StateMap: Sync {
    /// Full state vector (layout order) for a heat-exchange vector.
    fn state(&self, q: &DVector<f64>) -> Result<DVector<f64>, InferenceError>;
}

/// Batched evaluation result of a [`DifferentiableMap`]: one state row and one
/// backpropagated gradient row per input row.
pub struct BatchVjp {
    pub states: nalgebra::DMatrix<f64>,
    pub vjps: nalgebra::DMatrix<f64>,
}

/// A [`StateMap`] that can also backpropagate a state-space cotangent to the
/// heat-exchange space, as needed by gradient-based samplers.
pub trait DifferentiableMap: StateMap {
    /// Returns `(x, J^T w)` where `J = dx/dq` and `w` is a full-state vector.
    fn state_and_vjp(
        &self,
        q: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), InferenceError>;

    /// Evaluate many q rows at once. The cotangent for each row is computed
    /// from its state by the callback (the state must be known first, e.g.
    /// for likelihood gradients). The default runs row by row; batch-capable
    /// maps override it.
    fn states_and_vjps(
        &self,
        qs: &nalgebra::DMatrix<f64>,
        cotangent: &mut dyn FnMut(usize, &DVector<f64>) -> DVector<f64>,
    ) -> Result<BatchVjp, InferenceError> {
        let n = qs.nrows();
        let dq = qs.ncols();
        let mut states: Option<nalgebra::DMatrix<f64>> = None;
        let mut vjps = nalgebra::DMatrix::zeros(n, dq);
        for r in 0..n {
            let q = qs.row(r).transpose();
            let x = self.state(&q)?;
            let w = cotangent(r, &x);
            let (_, vjp) = self.state_and_vjp(&q, &w)?;
            let st = states.get_or_insert_with(|| nalgebra::DMatrix::zeros(n, x.len()));
            for c in 0..x.len() {
                st[(r, c)] = x[c];
            }
            for c in 0..dq {
                vjps[(r, c)] = vjp[c];
            }
        }
        Ok(BatchVjp { states: states.unwrap_or_else(|| nalgebra::DMatrix::zeros(n, 0)), vjps })
    }
}

/// Exact nonlinear map: presolve + Newton for every evaluation.
pub struct NrMap<'a> {
    pub topo: &'a GridTopology,
    pub cfg: SolverConfig,
}

impl StateMap for NrMap<'_> {
    fn state(&self, q: &DVector<f64>) -> Result<DVector<f64>, InferenceError> {
        let (state, report): (GridState, _) =
            solve(&HeatExchangeVector::new(q.clone()), self.topo, &self.cfg)?;
        if !report.converged {
            return Err(InferenceError::Solve(crate::error::SolveError::NotConverged {
                psi: report.psi,
                iterations: report.nr_iterations,
            }));
        }
        Ok(state.values)
    }
}

impl<F> StateMap for F
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    fn state(&self, q: &DVector<f64>) -> Result<DVector<f64>, InferenceError> {
        Ok(self(q))
    }
}

pub(crate) fn log_posterior(
    prior: &TruncatedNormalPrior,
    spec: &MeasurementSpec,
    m: &Measurement,
    x: &DVector<f64>,
    q: &DVector<f64>,
) -> f64 {
    let lp = prior.log_prior(q);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    lp + log_likelihood(spec, m, x)
}

/// Metropolis accept/reject rule shared by the samplers: accept when the
/// posterior ratio alpha = exp(log_ratio) is at least a U[0,1) draw.
/// Non-finite (-inf) log ratios are always rejected.
pub(crate) fn metropolis_accept(log_ratio: f64, rng: &mut impl rand::Rng) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio == f64::NEG_INFINITY || log_ratio.is_nan() {
        return false;
    }
    let u: f64 = rng.random::<f64>();
    log_ratio.exp() >= u
}
