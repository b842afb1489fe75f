//! Zero-truncated normal prior over heat exchanges.
//!
//! Demands are sampled positive; source magnitudes are sampled positive and
//! negated. Densities are unnormalised: inside the feasible orthant the prior
//! equals the untruncated normal with the same parameters (the missing
//! negative mass is a constant factor and cancels in acceptance ratios).
//! Outside it, the log-density is -inf with a custom gradient that points
//! back toward feasibility.

use crate::error::InferenceError;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct TruncatedNormalPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// +1 for demand entries, -1 for source entries.
    signs: DVector<f64>,
    /// factor F with cov = F F^T (eigen square root; tolerates singular cov)
    factor: DMatrix<f64>,
    /// eigenpairs of cov with eigenvalues clamped at zero
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

impl TruncatedNormalPrior {
    pub fn new(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        n_demands: usize,
        n_sources: usize,
    ) -> Result<Self, InferenceError> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d || n_demands + n_sources != d {
            return Err(InferenceError::Dimension(format!(
                "prior of dim {d} with cov {}x{} and {}+{} edges",
                cov.nrows(),
                cov.ncols(),
                n_demands,
                n_sources
            )));
        }
        let sym = 0.5 * (&cov + cov.transpose());
        let eig = sym.clone().symmetric_eigen();
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            if *v < -1e-9 * scale.max(1.0) {
                return Err(InferenceError::BadCovariance);
            }
            *v = v.max(0.0);
        }
        let mut factor = eig.eigenvectors.clone();
        for j in 0..d {
            let s = vals[j].sqrt();
            for i in 0..d {
                factor[(i, j)] *= s;
            }
        }
        let mut signs = DVector::from_element(d, 1.0);
        for i in n_demands..d {
            signs[i] = -1.0;
        }
        Ok(Self { mean, cov: sym, signs, factor, eigvecs: eig.eigenvectors, eigvals: vals })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    /// Mean of the magnitude distribution [kW].
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    /// Signs mapping magnitudes to heat-exchange values (+1 demand, -1 source).
    pub fn signs(&self) -> &DVector<f64> {
        &self.signs
    }
    /// Mean in heat-exchange coordinates (sources negated).
    pub fn mean_q(&self) -> DVector<f64> {
        self.mean.component_mul(&self.signs)
    }
    /// Per-entry marginal standard deviation.
    pub fn marginal_std(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| self.cov[(i, i)].sqrt()))
    }

    fn magnitudes(&self, q: &DVector<f64>) -> DVector<f64> {
        q.component_mul(&self.signs)
    }

    /// Solve cov * x = b over the positive eigenspace (pseudo-inverse).
    fn cov_pinv_mul(&self, b: &DVector<f64>) -> DVector<f64> {
        let proj = self.eigvecs.transpose() * b;
        let scale = self.eigvals.iter().fold(0.0f64, |a, &v| a.max(v));
        let floor = 1e-12 * scale.max(1.0);
        let scaled = DVector::from_iterator(
            self.dim(),
            proj.iter().zip(self.eigvals.iter()).map(
                |(&p, &l)| {
                    if l > floor {
                        p / l
                    } else {
                        0.0
                    }
                },
            ),
        );
        &self.eigvecs * scaled
    }

    /// Unnormalised log-density at a heat-exchange vector. Infeasible vectors
    /// (any demand negative, any source positive) yield -inf.
    pub fn log_prior(&self, q: &DVector<f64>) -> f64 {
        let z = self.magnitudes(q);
        if z.iter().any(|&v| v < 0.0) {
            return f64::NEG_INFINITY;
        }
        let r = &z - &self.mean;
        let half_quad = 0.5 * r.dot(&self.cov_pinv_mul(&r));
        let scale = self.eigvals.iter().fold(0.0f64, |a, &v| a.max(v));
        let floor = 1e-12 * scale.max(1.0);
        let logdet: f64 = self
            .eigvals
            .iter()
            .filter(|&&l| l > floor)
            .map(|&l| (l * 2.0 * std::f64::consts::PI).ln())
            .sum();
        -half_quad - 0.5 * logdet
    }

    /// Gradient of [`Self::log_prior`] with respect to q. At infeasible points
    /// the gradient is the feasibility-restoring direction: +-1 at offending
    /// entries (sign chosen to push the entry back into its orthant), zero
    /// elsewhere.
    pub fn grad_log_prior(&self, q: &DVector<f64>) -> DVector<f64> {
        let z = self.magnitudes(q);
        if z.iter().any(|&v| v < 0.0) {
            return DVector::from_iterator(
                self.dim(),
                z.iter().zip(self.signs.iter()).map(|(&zi, &s)| if zi < 0.0 { s } else { 0.0 }),
            );
        }
        let r = &z - &self.mean;
        let grad_z = -self.cov_pinv_mul(&r);
        grad_z.component_mul(&self.signs)
    }

    /// Draw `n` iid samples by rejection: multivariate normal draws with any
    /// negative magnitude discarded, sources negated afterwards. Rows of the
    /// result are heat-exchange vectors.
    pub fn sample(&self, n: usize, seed: u64) -> Result<DMatrix<f64>, InferenceError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with(
        &self,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<DMatrix<f64>, InferenceError> {
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut attempts = 0usize;
        let mut accepted = 0usize;
        while accepted < n {
            attempts += 1;
            // acceptance floor: give up when the empirical rate drops below 1e-3
            if attempts >= 10_000 && (accepted as f64) < 1e-3 * attempts as f64 {
                return Err(InferenceError::RejectionFloor { floor: 1e-3, attempts });
            }
            let u = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let z = &self.mean + &self.factor * u;
            if z.iter().any(|&v| v < 0.0) {
                continue;
            }
            for j in 0..d {
                out[(accepted, j)] = z[j] * self.signs[j];
            }
            accepted += 1;
        }
        Ok(out)
    }

    /// Single draw, used by samplers for chain initialisation.
    pub fn sample_one(&self, rng: &mut impl Rng) -> Result<DVector<f64>, InferenceError> {
        let m = self.sample_with(1, rng)?;
        Ok(m.row(0).transpose())
    }
}

/// Serialisable prior document (JSON file format).
#[derive(Debug, Serialize, Deserialize)]
pub struct PriorDoc {
    /// Heat-exchange edge names ("from->to"), demands first.
    pub edges: Vec<String>,
    pub n_demands: usize,
    pub mean_kw: Vec<f64>,
    pub cov_kw2: Vec<Vec<f64>>,
}

impl PriorDoc {
    pub fn from_prior(prior: &TruncatedNormalPrior, edges: Vec<String>) -> Self {
        let d = prior.dim();
        let n_demands = prior.signs().iter().filter(|&&s| s > 0.0).count();
        Self {
            edges,
            n_demands,
            mean_kw: prior.mean().iter().copied().collect(),
            cov_kw2: (0..d).map(|i| (0..d).map(|j| prior.cov()[(i, j)]).collect()).collect(),
        }
    }

    pub fn to_prior(&self) -> Result<TruncatedNormalPrior, InferenceError> {
        let d = self.mean_kw.len();
        if self.cov_kw2.len() != d || self.cov_kw2.iter().any(|r| r.len() != d) {
            return Err(InferenceError::Dimension("prior covariance is not square".into()));
        }
        let mean = DVector::from_row_slice(&self.mean_kw);
        let cov = DMatrix::from_fn(d, d, |i, j| self.cov_kw2[i][j]);
        TruncatedNormalPrior::new(mean, cov, self.n_demands, d - self.n_demands)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn diag_prior(mean: &[f64], var: &[f64]) -> TruncatedNormalPrior {
        let d = mean.len();
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            cov[(i, i)] = var[i];
        }
        TruncatedNormalPrior::new(DVector::from_row_slice(mean), cov, d, 0).unwrap()
    }

    #[test]
    fn log_prior_peaks_at_the_mean_with_zero_gradient() {
        let p = crate::grid::loop_prior();
        let q = p.mean_q();
        let expected = {
            // -1/2 log det(2 pi cov)
            let eig = p.cov().clone().symmetric_eigen();
            -0.5 * eig
                .eigenvalues
                .iter()
                .map(|l| (l * 2.0 * std::f64::consts::PI).ln())
                .sum::<f64>()
        };
        assert_relative_eq!(p.log_prior(&q), expected, epsilon = 1e-10);
        let g = p.grad_log_prior(&q);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn infeasible_entry_gives_neg_inf_and_unit_gradient() {
        let p = crate::grid::loop_prior();
        let mut q = p.mean_q();
        q[1] = -5.0;
        assert_eq!(p.log_prior(&q), f64::NEG_INFINITY);
        let g = p.grad_log_prior(&q);
        assert_eq!(g[1], 1.0);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn one_sigma_step_drops_half_a_nat() {
        let p = diag_prior(&[100.0, 50.0], &[25.0, 16.0]);
        let q0 = p.mean_q();
        let mut q1 = q0.clone();
        q1[0] += 5.0; // +1 sigma
        assert_relative_eq!(p.log_prior(&q0) - p.log_prior(&q1), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sampling_matches_moments_and_positivity() {
        let p = crate::grid::loop_prior();
        let n = 100_000;
        let s = p.sample(n, 42).unwrap();
        for i in 0..n {
            for j in 0..4 {
                assert!(s[(i, j)] > 0.0);
            }
        }
        // empirical mean within 3 standard errors (truncation shifts the mean
        // by well under one SE here: the closest boundary is 2 sigma away)
        for j in 0..4 {
            let mean = s.column(j).sum() / n as f64;
            let se = p.cov()[(j, j)].sqrt() / (n as f64).sqrt();
            assert!(
                (mean - p.mean()[j]).abs() < 3.0 * se + 0.05 * p.cov()[(j, j)].sqrt(),
                "dim {j}: mean {mean} vs {}",
                p.mean()[j]
            );
        }
        // empirical correlation between A and C
        let (ma, mc) = (s.column(0).sum() / n as f64, s.column(2).sum() / n as f64);
        let mut caa = 0.0;
        let mut ccc = 0.0;
        let mut cac = 0.0;
        for i in 0..n {
            let da = s[(i, 0)] - ma;
            let dc = s[(i, 2)] - mc;
            caa += da * da;
            ccc += dc * dc;
            cac += da * dc;
        }
        let corr = cac / (caa.sqrt() * ccc.sqrt());
        assert!((corr + 0.9).abs() < 0.05, "corr = {corr}");
    }

    #[test]
    fn zero_covariance_degenerates_to_the_mean() {
        let p = diag_prior(&[120.0, 30.0], &[0.0, 0.0]);
        let s = p.sample(10, 7).unwrap();
        for i in 0..10 {
            assert_eq!(s[(i, 0)], 120.0);
            assert_eq!(s[(i, 1)], 30.0);
        }
    }

    #[test]
    fn source_entries_are_negated_and_sign_checked() {
        let mut cov = DMatrix::zeros(2, 2);
        cov[(0, 0)] = 100.0;
        cov[(1, 1)] = 100.0;
        let p =
            TruncatedNormalPrior::new(DVector::from_row_slice(&[200.0, 80.0]), cov, 1, 1).unwrap();
        let s = p.sample(500, 3).unwrap();
        for i in 0..500 {
            assert!(s[(i, 0)] > 0.0);
            assert!(s[(i, 1)] < 0.0);
        }
        // feasible: negative source value
        let q = DVector::from_row_slice(&[200.0, -80.0]);
        assert!(p.log_prior(&q).is_finite());
        // infeasible: positive source value pushes down
        let q_bad = DVector::from_row_slice(&[200.0, 80.0]);
        assert_eq!(p.log_prior(&q_bad), f64::NEG_INFINITY);
        assert_eq!(p.grad_log_prior(&q_bad)[1], -1.0);
    }

    #[test]
    fn hopeless_prior_hits_rejection_floor() {
        // mean far below zero: acceptance ~ 0
        let p = diag_prior(&[-50.0, -50.0], &[1.0, 1.0]);
        assert!(matches!(
            p.sample(10, 0),
            Err(InferenceError::RejectionFloor { .. })
        ));
    }
}
