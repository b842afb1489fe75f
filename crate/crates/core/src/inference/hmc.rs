//! Hamiltonian MCMC with a single leapfrog step per proposal, run through a
//! differentiable state map (normally the trained surrogate).
//!
//! Positions are whitened by the prior marginal standard deviations so one
//! scalar step size serves all dimensions. The step size is adapted by
//! Nesterov dual averaging toward a 75% acceptance ratio on the first 80% of
//! the burn-in steps and frozen afterwards. Chains are advanced in lockstep
//! so the map can evaluate all of them as one batch.

use super::{
    grad_log_likelihood_state, log_posterior, metropolis_accept, DifferentiableMap, Measurement,
    MeasurementSpec, SampleProvenance, SampleSet, TruncatedNormalPrior,
};
use crate::error::InferenceError;
use crate::util::stream_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct HmcConfig {
    pub n_chains: usize,
    /// Retained samples per chain.
    pub n_steps: usize,
    pub n_burnin: usize,
    pub seed: u64,
    pub target_acceptance: f64,
    /// Initial step size in whitened coordinates.
    pub initial_step: f64,
    /// Fraction of burn-in used for step-size adaptation.
    pub adapt_fraction: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 10,
            n_steps: 10_000,
            n_burnin: 20_000,
            seed: 0,
            target_acceptance: 0.75,
            initial_step: 0.1,
            adapt_fraction: 0.8,
        }
    }
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    fn new(eps0: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            t: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64, target: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let eta = self.t.powf(-KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }
}

struct Chain {
    q: DVector<f64>,
    x: DVector<f64>,
    grad: DVector<f64>,
    log_post: f64,
    rng: ChaCha12Rng,
    adapt: DualAveraging,
    step_size: f64,
    post_adapt_accept: f64,
    post_adapt_steps: usize,
}

/// Gradient of the unnormalised log-posterior with respect to q:
/// grad log prior + (d log-likelihood / d x) backpropagated through the map.
fn posterior_grad(
    prior: &TruncatedNormalPrior,
    vjp: &DVector<f64>,
    q: &DVector<f64>,
) -> DVector<f64> {
    prior.grad_log_prior(q) + vjp
}

/// Run `n_chains` HMC chains and concatenate the post-burn-in samples.
/// Chain c draws from RNG stream c; results are independent of thread count.
pub fn hmc_chains(
    prior: &TruncatedNormalPrior,
    spec: &MeasurementSpec,
    m: &Measurement,
    map: &(impl DifferentiableMap + ?Sized),
    cfg: &HmcConfig,
) -> Result<SampleSet, InferenceError> {
    let d = prior.dim();
    let scales = {
        let mut s = prior.marginal_std();
        for v in s.iter_mut() {
            if *v <= 0.0 {
                *v = 1.0;
            }
        }
        s
    };
    let adapt_until = (cfg.adapt_fraction * cfg.n_burnin as f64).floor() as usize;

    // initial points drawn from the prior, one stream per chain
    let mut chains: Vec<Chain> = (0..cfg.n_chains)
        .map(|c| -> Result<Chain, InferenceError> {
            let mut init_rng = stream_rng(cfg.seed, 0x1000 + c as u64);
            let q = prior.sample_one(&mut init_rng)?;
            let x = map.state(&q)?;
            let w = grad_log_likelihood_state(spec, m, &x);
            let (_, vjp) = map.state_and_vjp(&q, &w)?;
            let log_post = log_posterior(prior, spec, m, &x, &q);
            if !log_post.is_finite() {
                return Err(InferenceError::BadStart);
            }
            Ok(Chain {
                q,
                x,
                grad: posterior_grad(prior, &vjp, &DVector::zeros(d)),
                log_post,
                rng: stream_rng(cfg.seed, c as u64),
                adapt: DualAveraging::new(cfg.initial_step),
                step_size: cfg.initial_step,
                post_adapt_accept: 0.0,
                post_adapt_steps: 0,
            })
        })
        .collect::<Result<_, _>>()?;
    // fix the gradient at the true initial points
    for chain in chains.iter_mut() {
        let w = grad_log_likelihood_state(spec, m, &chain.x);
        let (_, vjp) = map.state_and_vjp(&chain.q, &w)?;
        chain.grad = posterior_grad(prior, &vjp, &chain.q);
    }

    let dx = chains[0].x.len();
    let total = cfg.n_chains * cfg.n_steps;
    let mut q_mat = DMatrix::zeros(total, d);
    let mut x_mat = DMatrix::zeros(total, dx);
    let mut tags = Vec::with_capacity(total);
    let mut kept = vec![0usize; cfg.n_chains];

    for step in 0..cfg.n_burnin + cfg.n_steps {
        // leapfrog (one step) per chain; proposals evaluated as one batch
        let mut momenta = Vec::with_capacity(cfg.n_chains);
        let mut proposals = DMatrix::zeros(cfg.n_chains, d);
        for (c, chain) in chains.iter_mut().enumerate() {
            let p0 = DVector::from_iterator(
                d,
                (0..d).map(|_| chain.rng.sample::<f64, _>(StandardNormal)),
            );
            let eps = chain.step_size;
            let p_half = &p0 + 0.5 * eps * chain.grad.component_mul(&scales);
            let q_new = &chain.q + eps * p_half.component_mul(&scales);
            for j in 0..d {
                proposals[(c, j)] = q_new[j];
            }
            momenta.push((p0, p_half));
        }
        let batch = map.states_and_vjps(&proposals, &mut |row, x| {
            let _ = row;
            grad_log_likelihood_state(spec, m, x)
        })?;

        for (c, chain) in chains.iter_mut().enumerate() {
            let q_new = proposals.row(c).transpose();
            let x_new = batch.states.row(c).transpose();
            let grad_new = posterior_grad(prior, &batch.vjps.row(c).transpose(), &q_new);
            let (p0, p_half) = &momenta[c];
            let eps = chain.step_size;
            let p_new = p_half + 0.5 * eps * grad_new.component_mul(&scales);
            let lp_new = log_posterior(prior, spec, m, &x_new, &q_new);
            let h_old = -chain.log_post + 0.5 * p0.norm_squared();
            let h_new = -lp_new + 0.5 * p_new.norm_squared();
            let log_ratio = h_old - h_new;
            let accept_prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
            if metropolis_accept(log_ratio, &mut chain.rng) {
                chain.q = q_new;
                chain.x = x_new;
                chain.grad = grad_new;
                chain.log_post = lp_new;
            }
            if step < adapt_until {
                chain.adapt.update(accept_prob, cfg.target_acceptance);
                chain.step_size = chain.adapt.log_eps.exp();
                if step + 1 == adapt_until {
                    chain.step_size = chain.adapt.log_eps_bar.exp();
                }
            } else {
                chain.post_adapt_accept += accept_prob;
                chain.post_adapt_steps += 1;
            }
            if step >= cfg.n_burnin {
                let row = c * cfg.n_steps + kept[c];
                for j in 0..d {
                    q_mat[(row, j)] = chain.q[j];
                }
                for j in 0..dx {
                    x_mat[(row, j)] = chain.x[j];
                }
                kept[c] += 1;
            }
        }
    }
    for (c, &k) in kept.iter().enumerate() {
        debug_assert_eq!(k, cfg.n_steps);
        for s in 0..cfg.n_steps {
            tags.push((c as u32, s as u64));
        }
    }

    let mean_acceptance = chains
        .iter()
        .map(|c| c.post_adapt_accept / c.post_adapt_steps.max(1) as f64)
        .sum::<f64>()
        / cfg.n_chains as f64;
    let mut warnings = Vec::new();
    if !(0.4..=0.95).contains(&mean_acceptance) {
        warnings.push(format!(
            "post-adaptation acceptance {mean_acceptance:.3} outside [0.40, 0.95]"
        ));
    }
    Ok(SampleSet {
        q: q_mat,
        x: x_mat,
        weights: None,
        tags,
        provenance: SampleProvenance {
            sampler: "hmc".into(),
            seed: cfg.seed,
            n_chains: cfg.n_chains,
            steps_per_chain: cfg.n_steps,
            burnin: cfg.n_burnin,
            warnings,
            effective_sample_size: None,
            mean_acceptance: Some(mean_acceptance),
            step_sizes: Some(chains.iter().map(|c| c.step_size).collect()),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{MeasurementSpec, StateMap};
    use nalgebra::DMatrix;

    /// Identity embedding: the "state" is the heat-exchange vector itself.
    struct IdentityMap;

    impl StateMap for IdentityMap {
        fn state(&self, q: &DVector<f64>) -> Result<DVector<f64>, InferenceError> {
            Ok(q.clone())
        }
    }

    impl DifferentiableMap for IdentityMap {
        fn state_and_vjp(
            &self,
            q: &DVector<f64>,
            w: &DVector<f64>,
        ) -> Result<(DVector<f64>, DVector<f64>), InferenceError> {
            Ok((q.clone(), w.clone()))
        }
    }

    fn gaussian_prior(d: usize, mean: f64, var: f64) -> TruncatedNormalPrior {
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            cov[(i, i)] = var;
        }
        TruncatedNormalPrior::new(DVector::from_element(d, mean), cov, d, 0).unwrap()
    }

    #[test]
    fn samples_a_standard_gaussian_target() {
        // identity map, unit prior centred 50 sigma inside the feasible region
        let topo = crate::grid::make_loop_grid();
        let spec = MeasurementSpec::new(&topo, &[]).unwrap();
        let m = Measurement::new(DVector::zeros(0));
        let prior = gaussian_prior(2, 50.0, 1.0);
        let cfg = HmcConfig {
            n_chains: 10,
            n_steps: 10_000,
            n_burnin: 2_000,
            seed: 11,
            ..HmcConfig::default()
        };
        let set = hmc_chains(&prior, &spec, &m, &IdentityMap, &cfg).unwrap();
        assert_eq!(set.len(), 100_000);

        // mean within 3 between-chain standard errors
        for dim in 0..2 {
            let chain_means: Vec<f64> = (0..10)
                .map(|c| {
                    (0..10_000).map(|s| set.q[(c * 10_000 + s, dim)]).sum::<f64>() / 10_000.0
                })
                .collect();
            let grand = chain_means.iter().sum::<f64>() / 10.0;
            let var_means =
                chain_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / 9.0;
            let se = (var_means / 10.0).sqrt();
            assert!(
                (grand - 50.0).abs() <= 3.0 * se.max(1e-3),
                "dim {dim}: mean {grand}, se {se}"
            );
        }
        // covariance within 5% of the identity
        let n = set.len() as f64;
        let mu: Vec<f64> =
            (0..2).map(|j| (0..set.len()).map(|i| set.q[(i, j)]).sum::<f64>() / n).collect();
        let mut cov = [[0.0f64; 2]; 2];
        for i in 0..set.len() {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += (set.q[(i, a)] - mu[a]) * (set.q[(i, b)] - mu[b]);
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] /= n - 1.0;
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (cov[a][b] - want).abs() < 0.05,
                    "cov[{a}][{b}] = {}",
                    cov[a][b]
                );
            }
        }
        // the adapted acceptance should sit near the 75% target
        let acc = set.provenance.mean_acceptance.unwrap();
        assert!((0.6..=0.9).contains(&acc), "acceptance {acc}");
        assert!(set.provenance.warnings.is_empty());
    }

    #[test]
    fn chain_accounting_is_exact() {
        let topo = crate::grid::make_loop_grid();
        let spec = MeasurementSpec::new(&topo, &[]).unwrap();
        let m = Measurement::new(DVector::zeros(0));
        let prior = gaussian_prior(3, 40.0, 2.0);
        let cfg = HmcConfig {
            n_chains: 3,
            n_steps: 50,
            n_burnin: 20,
            seed: 5,
            ..HmcConfig::default()
        };
        let set = hmc_chains(&prior, &spec, &m, &IdentityMap, &cfg).unwrap();
        assert_eq!(set.len(), 150);
        assert_eq!(set.tags.len(), 150);
        for c in 0..3u32 {
            assert_eq!(set.tags.iter().filter(|t| t.0 == c).count(), 50);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let topo = crate::grid::make_loop_grid();
        let spec = MeasurementSpec::new(&topo, &[]).unwrap();
        let m = Measurement::new(DVector::zeros(0));
        let prior = gaussian_prior(2, 30.0, 1.0);
        let cfg = HmcConfig { n_chains: 2, n_steps: 100, n_burnin: 50, seed: 9, ..HmcConfig::default() };
        let a = hmc_chains(&prior, &spec, &m, &IdentityMap, &cfg).unwrap();
        let b = hmc_chains(&prior, &spec, &m, &IdentityMap, &cfg).unwrap();
        assert_eq!(a.q, b.q);
        assert_eq!(a.x, b.x);
    }
}
