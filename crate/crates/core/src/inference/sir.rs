//! Sampling importance resampling in heat-exchange space: prior draws are
//! mapped to states, weighted by the measurement likelihood, and resampled
//! with replacement proportionally to the normalised weights.

use super::{
    log_likelihood, Measurement, MeasurementSpec, SampleProvenance, SampleSet, StateMap,
    TruncatedNormalPrior,
};
use crate::error::InferenceError;
use crate::util::stream_rng;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct SirConfig {
    /// Number of prior draws.
    pub n: usize,
    /// Number of resampled output samples.
    pub m_out: usize,
    pub seed: u64,
}

/// Multinomial resampling: `m_out` independent index draws with probability
/// proportional to `weights`. Scaling all weights by a constant leaves the
/// outcome unchanged.
pub(crate) fn resample_multinomial(
    weights: &[f64],
    m_out: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w / total;
        cumulative.push(acc);
    }
    *cumulative.last_mut().expect("nonempty weights") = 1.0;
    (0..m_out)
        .map(|_| {
            let u: f64 = rng.random();
            cumulative.partition_point(|&c| c <= u).min(weights.len() - 1)
        })
        .collect()
}

/// Run SIR. `map` is the exact solver by default (ground-truth mode) but any
/// [`StateMap`] works. Sample i is drawn from RNG stream i of the seed, so
/// the result does not depend on thread count.
pub fn sir_mc(
    prior: &TruncatedNormalPrior,
    spec: &MeasurementSpec,
    m: &Measurement,
    map: &(impl StateMap + ?Sized),
    cfg: &SirConfig,
) -> Result<SampleSet, InferenceError> {
    if cfg.n < cfg.m_out || cfg.m_out == 0 {
        return Err(InferenceError::Dimension(format!(
            "need n >= m_out >= 1, got n = {}, m_out = {}",
            cfg.n, cfg.m_out
        )));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| -> Result<_, InferenceError> {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let q = prior.sample_one(&mut rng)?;
            let x = map.state(&q)?;
            let ll = log_likelihood(spec, m, &x);
            Ok((q.iter().copied().collect(), x.iter().copied().collect(), ll))
        })
        .collect::<Result<_, _>>()?;

    // normalised weights via log-sum-exp
    let max_ll = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = rows.iter().map(|r| (r.2 - max_ll).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let n_eff = sum * sum / sum_sq;

    let mut warnings = Vec::new();
    if n_eff < 50.0 {
        warnings.push(format!(
            "effective sample size {n_eff:.1} < 50: weights are degenerate, increase n or review the measurement"
        ));
    }

    let mut rng = stream_rng(cfg.seed, u64::MAX / 2);
    let picks = resample_multinomial(&weights, cfg.m_out, &mut rng);

    let dq = prior.dim();
    let dx = rows[0].1.len();
    let mut q_mat = DMatrix::zeros(cfg.m_out, dq);
    let mut x_mat = DMatrix::zeros(cfg.m_out, dx);
    let mut tags = Vec::with_capacity(cfg.m_out);
    for (r, &pick) in picks.iter().enumerate() {
        for c in 0..dq {
            q_mat[(r, c)] = rows[pick].0[c];
        }
        for c in 0..dx {
            x_mat[(r, c)] = rows[pick].1[c];
        }
        tags.push((0u32, r as u64));
    }
    Ok(SampleSet {
        q: q_mat,
        x: x_mat,
        weights: None,
        tags,
        provenance: SampleProvenance {
            sampler: "sir".into(),
            seed: cfg.seed,
            n_chains: 1,
            steps_per_chain: cfg.m_out,
            burnin: 0,
            warnings,
            effective_sample_size: Some(n_eff),
            mean_acceptance: None,
            step_sizes: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use nalgebra::DVector;

    #[test]
    fn uniform_weights_resample_uniformly() {
        let weights = vec![1.0; 100];
        let mut rng = stream_rng(1, 0);
        let picks = resample_multinomial(&weights, 100_000, &mut rng);
        let mut counts = vec![0usize; 100];
        for p in picks {
            counts[p] += 1;
        }
        // chi-square against the uniform expectation
        let expected = 1000.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99 dof: the 0.01 upper quantile is ~134.6
        assert!(chi2 < 134.642, "chi2 = {chi2}");
    }

    #[test]
    fn degenerate_weight_copies_one_sample() {
        let mut weights = vec![0.0; 20];
        weights[7] = 1.0;
        let mut rng = stream_rng(2, 0);
        let picks = resample_multinomial(&weights, 50, &mut rng);
        assert!(picks.iter().all(|&p| p == 7));
    }

    #[test]
    fn weight_scaling_leaves_resampling_unchanged() {
        let weights: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let scaled: Vec<f64> = weights.iter().map(|w| w * 123.456).collect();
        let a = resample_multinomial(&weights, 500, &mut stream_rng(3, 0));
        let b = resample_multinomial(&scaled, 500, &mut stream_rng(3, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn no_measurement_means_uniform_resampling_over_inputs() {
        // empty measurement spec: all log-likelihoods are zero
        let topo = crate::grid::make_loop_grid();
        let prior = crate::grid::loop_prior();
        let spec = MeasurementSpec::new(&topo, &[]).unwrap();
        let m = Measurement::new(DVector::zeros(0));
        // identity-ish map: embed q into a fake 4-dim state
        let map = |q: &DVector<f64>| q.clone();
        let set = sir_mc(&prior, &spec, &m, &map, &SirConfig { n: 500, m_out: 400, seed: 5 })
            .unwrap();
        assert_eq!(set.len(), 400);
        assert_eq!(set.provenance.effective_sample_size, Some(500.0));
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        let prior = crate::grid::loop_prior();
        let topo = crate::grid::make_loop_grid();
        let spec = MeasurementSpec::new(&topo, &[]).unwrap();
        let m = Measurement::new(DVector::zeros(0));
        let map = |q: &DVector<f64>| q.clone();
        assert!(sir_mc(&prior, &spec, &m, &map, &SirConfig { n: 5, m_out: 10, seed: 0 }).is_err());
    }
}
