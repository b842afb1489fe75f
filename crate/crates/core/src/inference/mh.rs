//! Random-walk Metropolis-Hastings in heat-exchange space.

use super::{
    log_posterior, metropolis_accept, Measurement, MeasurementSpec, SampleProvenance, SampleSet,
    StateMap, TruncatedNormalPrior,
};
use crate::error::InferenceError;
use crate::util::{psd_factor, stream_rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct MhConfig {
    pub n_steps: usize,
    /// Covariance of the Gaussian random-walk proposal.
    pub proposal_cov: DMatrix<f64>,
    pub seed: u64,
    /// Stream id so independent chains of one run stay decorrelated.
    pub chain_id: u32,
}

/// One Metropolis-Hastings chain of `n_steps` samples starting at `q0`.
/// Rejected proposals repeat the previous sample. Proposals outside the prior
/// support are rejected outright without evaluating the state map.
pub fn mh_chain(
    prior: &TruncatedNormalPrior,
    spec: &MeasurementSpec,
    m: &Measurement,
    map: &(impl StateMap + ?Sized),
    q0: &DVector<f64>,
    cfg: &MhConfig,
) -> Result<SampleSet, InferenceError> {
    let d = prior.dim();
    if q0.len() != d || cfg.proposal_cov.nrows() != d || cfg.proposal_cov.ncols() != d {
        return Err(InferenceError::Dimension("q0/proposal dimensions".into()));
    }
    let factor = psd_factor(&cfg.proposal_cov);
    let mut rng = stream_rng(cfg.seed, cfg.chain_id as u64);

    let mut q = q0.clone();
    let mut x = map.state(&q)?;
    let mut lp = log_posterior(prior, spec, m, &x, &q);
    if !lp.is_finite() {
        return Err(InferenceError::BadStart);
    }

    let dx = x.len();
    let mut q_mat = DMatrix::zeros(cfg.n_steps, d);
    let mut x_mat = DMatrix::zeros(cfg.n_steps, dx);
    let mut tags = Vec::with_capacity(cfg.n_steps);
    let mut accepted = 0usize;
    for step in 0..cfg.n_steps {
        let noise =
            DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let q_new = &q + &factor * noise;
        // infeasible proposals have zero posterior mass
        if prior.log_prior(&q_new) > f64::NEG_INFINITY {
            let x_new = map.state(&q_new)?;
            let lp_new = log_posterior(prior, spec, m, &x_new, &q_new);
            if metropolis_accept(lp_new - lp, &mut rng) {
                q = q_new;
                x = x_new;
                lp = lp_new;
                accepted += 1;
            }
        } else {
            // draw for reproducible stream alignment with the accept branch
            let _: f64 = rng.random();
        }
        if step + 1 == 1000 && accepted == 0 {
            return Err(InferenceError::StuckChain(1000));
        }
        for c in 0..d {
            q_mat[(step, c)] = q[c];
        }
        for c in 0..dx {
            x_mat[(step, c)] = x[c];
        }
        tags.push((cfg.chain_id, step as u64));
    }

    Ok(SampleSet {
        q: q_mat,
        x: x_mat,
        weights: None,
        tags,
        provenance: SampleProvenance {
            sampler: "mh".into(),
            seed: cfg.seed,
            n_chains: 1,
            steps_per_chain: cfg.n_steps,
            burnin: 0,
            warnings: Vec::new(),
            effective_sample_size: None,
            mean_acceptance: Some(accepted as f64 / cfg.n_steps as f64),
            step_sizes: None,
        },
    })
}
