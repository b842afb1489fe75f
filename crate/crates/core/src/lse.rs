//! Linearised probabilistic state estimation: one Taylor expansion of the
//! solver map at the prior-mean demands, Gaussian pushforward, and a
//! conjugate Bayesian update. The pushforward covariance is rank-deficient
//! (fewer heat exchanges than states), so eigenvalues below a relative floor
//! are lifted before inversion. The truncation of the demand prior is
//! deliberately ignored here; that is the baseline's documented weakness.

use crate::error::{InferenceError, SolveError};
use crate::grid::{GridTopology, HeatExchangeVector};
use crate::inference::{Measurement, MeasurementSpec, SampleProvenance, SampleSet, TruncatedNormalPrior};
use crate::solver::{jacobian_at, solve, SolverConfig};
use crate::util::{psd_factor, stream_rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Relative eigenvalue floor applied to the pushforward covariance.
pub const RANK_FLOOR: f64 = 1e-8;

/// Gaussian posterior over the FREE state entries.
#[derive(Debug, Clone)]
pub struct GaussianStatePosterior {
    /// Free-entry names, aligned with `mean`.
    pub names: Vec<String>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Full-layout indices of the free entries.
    pub free_indices: Vec<usize>,
}

/// Posterior over free states from the linearisation seam: `mu_x` and `j` are
/// the map value and Jacobian at the prior mean, both over free entries only.
/// Split out so an affine test map can exercise the update in isolation.
pub fn lse_posterior_from_linearization(
    mu_x: &DVector<f64>,
    j: &DMatrix<f64>,
    prior_cov_q: &DMatrix<f64>,
    spec_rows: &[usize],
    sigmas: &[f64],
    m: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), InferenceError> {
    let n = mu_x.len();
    // pushforward covariance and its eigenvalue repair
    let sigma_lse = j * prior_cov_q * j.transpose();
    let eig = (0.5 * (&sigma_lse + sigma_lse.transpose())).symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    let floor = RANK_FLOOR * lambda_max.max(1e-300);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(floor);
    }
    // the floored inverse shares the eigenbasis
    let vt = eig.eigenvectors.transpose();
    let mut prec = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let col = eig.eigenvectors.column(k);
        for i in 0..n {
            for jj in 0..n {
                prec[(i, jj)] += col[i] * vt[(k, jj)] / vals[k];
            }
        }
    }
    // information-form conjugate update with diagonal measurement noise
    let mut post_prec = prec.clone();
    let mut rhs = &prec * mu_x;
    for (k, &row) in spec_rows.iter().enumerate() {
        let w = 1.0 / (sigmas[k] * sigmas[k]);
        post_prec[(row, row)] += w;
        rhs[row] += w * m[k];
    }
    let chol = post_prec
        .clone()
        .cholesky()
        .ok_or_else(|| InferenceError::Format("posterior precision is not PD".into()))?;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    Ok((mean, cov))
}

/// Full pipeline: solve at the prior mean, linearise there, update with the
/// measurement.
pub fn lse_posterior(
    prior: &TruncatedNormalPrior,
    spec: &MeasurementSpec,
    m: &Measurement,
    topo: &GridTopology,
    cfg: &SolverConfig,
) -> Result<GaussianStatePosterior, InferenceError> {
    let lay = topo.layout();
    let mu_q = prior.mean_q();
    let (state, report) = solve(&HeatExchangeVector::new(mu_q.clone()), topo, cfg)?;
    if !report.converged {
        return Err(InferenceError::Solve(SolveError::NotConverged {
            psi: report.psi,
            iterations: report.nr_iterations,
        }));
    }
    let j_full = jacobian_at(&state, &HeatExchangeVector::new(mu_q), topo)?;
    let free = lay.free_indices().to_vec();
    let n = free.len();
    let mut j = DMatrix::zeros(n, topo.q_dim());
    let mut mu_x = DVector::zeros(n);
    for (slot, &full) in free.iter().enumerate() {
        mu_x[slot] = state.values[full];
        for c in 0..topo.q_dim() {
            j[(slot, c)] = j_full[(full, c)];
        }
    }
    // measurement rows in free-slot coordinates
    let spec_rows: Vec<usize> = spec
        .indices()
        .iter()
        .map(|&full| lay.free_slot(full).expect("measured entries are free"))
        .collect();
    let (mean, cov) = lse_posterior_from_linearization(
        &mu_x,
        &j,
        prior.cov(),
        &spec_rows,
        spec.sigmas(),
        &m.values,
    )?;
    Ok(GaussianStatePosterior {
        names: free.iter().map(|&i| lay.name(i).to_string()).collect(),
        mean,
        cov,
        free_indices: free,
    })
}

impl GaussianStatePosterior {
    /// Draw `n` samples and package them as a [`SampleSet`] over full states
    /// (fixed entries at their setpoints), for sample-based metrics.
    pub fn sample_set(&self, topo: &GridTopology, n: usize, seed: u64) -> SampleSet {
        let factor = psd_factor(&self.cov);
        let d = self.mean.len();
        let mut rng = stream_rng(seed, 0);
        let dim = topo.layout().dim();
        let mut x = DMatrix::zeros(n, dim);
        for r in 0..n {
            let u = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let free = &self.mean + &factor * u;
            let full = topo.state_from_free(&free);
            for c in 0..dim {
                x[(r, c)] = full.values[c];
            }
        }
        SampleSet {
            q: DMatrix::zeros(n, 0),
            x,
            weights: None,
            tags: (0..n).map(|i| (0u32, i as u64)).collect(),
            provenance: SampleProvenance {
                sampler: "lse".into(),
                seed,
                n_chains: 1,
                steps_per_chain: n,
                burnin: 0,
                ..Default::default()
            },
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            names: &'a [String],
            mean: Vec<f64>,
            cov: Vec<Vec<f64>>,
        }
        let n = self.mean.len();
        let doc = Doc {
            names: &self.names,
            mean: self.mean.iter().copied().collect(),
            cov: (0..n).map(|i| (0..n).map(|j| self.cov[(i, j)]).collect()).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("posterior serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, InferenceError> {
        #[derive(Deserialize)]
        struct Doc {
            names: Vec<String>,
            mean: Vec<f64>,
            cov: Vec<Vec<f64>>,
        }
        let doc: Doc =
            serde_json::from_str(text).map_err(|e| InferenceError::Format(e.to_string()))?;
        let n = doc.mean.len();
        Ok(Self {
            names: doc.names,
            mean: DVector::from_row_slice(&doc.mean),
            cov: DMatrix::from_fn(n, n, |i, j| doc.cov[i][j]),
            free_indices: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{loop_prior, make_loop_grid};
    use approx::assert_relative_eq;

    #[test]
    fn affine_map_matches_the_closed_form_conjugate_posterior() {
        // square nonsingular J keeps the pushforward full-rank, so the floor
        // is inert and the result must equal the textbook Kalman update
        let j = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, -0.3, 1.1, 0.5, 0.0, 0.4, 0.9]);
        let mu_x = DVector::from_row_slice(&[10.0, -4.0, 7.0]);
        let mut prior_cov = DMatrix::zeros(3, 3);
        prior_cov[(0, 0)] = 4.0;
        prior_cov[(1, 1)] = 2.5;
        prior_cov[(2, 2)] = 1.5;
        prior_cov[(0, 1)] = 0.8;
        prior_cov[(1, 0)] = 0.8;
        let spec_rows = vec![0usize, 2];
        let sigmas = vec![0.5, 0.25];
        let m = DVector::from_row_slice(&[10.6, 6.8]);
        let (mean, cov) =
            lse_posterior_from_linearization(&mu_x, &j, &prior_cov, &spec_rows, &sigmas, &m)
                .unwrap();

        // independent route: Kalman gain form on the same pushforward
        let sigma_x = &j * &prior_cov * j.transpose();
        let mut h = DMatrix::zeros(2, 3);
        h[(0, 0)] = 1.0;
        h[(1, 2)] = 1.0;
        let mut r = DMatrix::zeros(2, 2);
        r[(0, 0)] = 0.25;
        r[(1, 1)] = 0.0625;
        let s = &h * &sigma_x * h.transpose() + &r;
        let k = &sigma_x * h.transpose() * s.try_inverse().unwrap();
        let mean_ref = &mu_x + &k * (&m - &h * &mu_x);
        let cov_ref = (DMatrix::identity(3, 3) - &k * &h) * &sigma_x;
        for i in 0..3 {
            assert_relative_eq!(mean[i], mean_ref[i], epsilon = 1e-8);
            for jj in 0..3 {
                assert_relative_eq!(cov[(i, jj)], cov_ref[(i, jj)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn eigenvalue_floor_changes_little_but_fixes_rank() {
        // rank-1 pushforward in 2 states
        let j = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let mu_x = DVector::from_row_slice(&[5.0, 5.0]);
        let prior_cov = DMatrix::from_element(1, 1, 9.0);
        let (_, cov) = lse_posterior_from_linearization(
            &mu_x,
            &j,
            &prior_cov,
            &[0],
            &[1e6], // nearly uninformative measurement
            &DVector::from_row_slice(&[5.0]),
        )
        .unwrap();
        let sigma = &j * &prior_cov * j.transpose();
        // spectral-norm deviation bounded by the floor
        let diff = &cov - &sigma;
        let eig = diff.symmetric_eigen();
        let spectral = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(spectral <= 2.0 * RANK_FLOOR * 18.0 + 1e-6, "spectral diff {spectral}");
    }

    #[test]
    fn near_exact_measurements_pin_the_measured_entries() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let lay = topo.layout();
        // measure as many entries as there are demands, with tiny noise
        let entries = vec![
            ("T:hp_r".to_string(), 1e-4),
            ("mdot:hp_r->hp_s".to_string(), 1e-5),
            ("T:s_b".to_string(), 1e-4),
            ("mdot:s_d->s_b".to_string(), 1e-5),
        ];
        let spec = MeasurementSpec::new(&topo, &entries).unwrap();
        let m = Measurement::new(DVector::from_row_slice(&[48.5, 2.3, 113.5, 0.05]));
        let post = lse_posterior(&prior, &spec, &m, &topo, &SolverConfig::tight()).unwrap();
        for (k, &full) in spec.indices().iter().enumerate() {
            let slot = lay.free_slot(full).unwrap();
            assert!(
                (post.mean[slot] - m.values[k]).abs() < 2e-2,
                "{}: {} vs measured {}",
                lay.name(full),
                post.mean[slot],
                m.values[k]
            );
        }
    }

    #[test]
    fn measurements_never_inflate_variance_on_measured_directions() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let lay = topo.layout();
        let entries =
            vec![("T:hp_r".to_string(), 0.49), ("mdot:hp_r->hp_s".to_string(), 0.022)];
        let spec = MeasurementSpec::new(&topo, &entries).unwrap();
        let m = Measurement::new(DVector::from_row_slice(&[48.0, 2.6]));
        let cfg = SolverConfig::tight();
        let post = lse_posterior(&prior, &spec, &m, &topo, &cfg).unwrap();
        // prior pushforward for comparison
        let mu_q = prior.mean_q();
        let (state, _) = solve(&HeatExchangeVector::new(mu_q.clone()), &topo, &cfg).unwrap();
        let jf = jacobian_at(&state, &HeatExchangeVector::new(mu_q), &topo).unwrap();
        for &full in spec.indices() {
            let slot = lay.free_slot(full).unwrap();
            let mut row = DVector::zeros(topo.q_dim());
            for c in 0..topo.q_dim() {
                row[c] = jf[(full, c)];
            }
            let push_var = (row.transpose() * prior.cov() * &row)[(0, 0)];
            assert!(
                post.cov[(slot, slot)] <= push_var + 1e-9,
                "{}: posterior var {} vs pushforward {}",
                lay.name(full),
                post.cov[(slot, slot)],
                push_var
            );
        }
    }

    #[test]
    fn posterior_json_round_trips() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let spec = MeasurementSpec::new(&topo, &[("T:hp_r".into(), 0.5)]).unwrap();
        let m = Measurement::new(DVector::from_row_slice(&[48.0]));
        let post = lse_posterior(&prior, &spec, &m, &topo, &SolverConfig::tight()).unwrap();
        let re = GaussianStatePosterior::from_json(&post.to_json()).unwrap();
        assert_eq!(re.mean, post.mean);
        assert_eq!(re.cov, post.cov);
    }
}
