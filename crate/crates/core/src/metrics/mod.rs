//! Evaluation measures: the residual metric psi, groupwise MAE/MAPE, energy
//! distance, and quantile/mean discrepancies between posterior sample sets.

mod report;

pub use report::{evaluate_posteriors, posterior_metrics, EstimatorOutput, GroupMetrics,
    PosteriorMetrics, ReplicationReport};

use crate::grid::{residual, GridState, GridTopology, HeatExchangeVector, VarKind};
use crate::util::stream_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Mean squared residual norm of predicted states against their heat
/// exchanges: `(1/N) sum_i ||e(x_i, q_i, eta)||^2` in the crate's unit
/// convention (kg/s, degC, bar, kW).
pub fn psi(states: &DMatrix<f64>, qs: &DMatrix<f64>, topo: &GridTopology) -> f64 {
    let n = states.nrows();
    assert_eq!(n, qs.nrows());
    let mut total = 0.0;
    for r in 0..n {
        let state = GridState { values: states.row(r).transpose() };
        let q = HeatExchangeVector::new(qs.row(r).transpose());
        total += residual(&state, &q, topo).expect("dimensions match").norm_squared();
    }
    total / n as f64
}

/// Groupwise mean absolute error and mean absolute percentage error of
/// predicted state rows against reference rows. MAPE skips (and counts)
/// entries whose reference value is zero.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MaeMape {
    pub mae: f64,
    pub mape_percent: f64,
    /// Entries excluded from the MAPE because the reference was zero.
    pub mape_excluded: usize,
}

pub fn mae_mape(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    topo: &GridTopology,
) -> std::collections::BTreeMap<&'static str, MaeMape> {
    assert_eq!(pred.shape(), truth.shape());
    let lay = topo.layout();
    let mut acc: std::collections::BTreeMap<&'static str, (f64, usize, f64, usize, usize)> =
        Default::default();
    for (kind, name) in [
        (VarKind::NodeTemperature, "T"),
        (VarKind::NodePressure, "p"),
        (VarKind::EdgeMassflow, "mdot"),
        (VarKind::EdgeEndTemperature, "Tend"),
    ] {
        let cols: Vec<usize> = (0..lay.dim()).filter(|&i| lay.kind(i) == kind).collect();
        let entry = acc.entry(name).or_default();
        for r in 0..pred.nrows() {
            for &c in &cols {
                let err = (pred[(r, c)] - truth[(r, c)]).abs();
                entry.0 += err;
                entry.1 += 1;
                if truth[(r, c)] != 0.0 {
                    entry.2 += err / truth[(r, c)].abs();
                    entry.3 += 1;
                } else {
                    entry.4 += 1;
                }
            }
        }
    }
    acc.into_iter()
        .map(|(k, (sum_err, n, sum_rel, n_rel, excluded))| {
            (
                k,
                MaeMape {
                    mae: sum_err / n.max(1) as f64,
                    mape_percent: 100.0 * sum_rel / n_rel.max(1) as f64,
                    mape_excluded: excluded,
                },
            )
        })
        .collect()
}

/// Subsample cap for the O(N^2) energy-distance sums.
pub const ENERGY_SUBSAMPLE: usize = 5000;

fn subsample(x: &DMatrix<f64>, cap: usize, seed: u64) -> DMatrix<f64> {
    if x.nrows() <= cap {
        return x.clone();
    }
    let mut rng = stream_rng(seed, 0xE5);
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    // partial Fisher-Yates: the first `cap` entries form the sample
    for i in 0..cap {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut out = DMatrix::zeros(cap, x.ncols());
    for (r, &src) in idx[..cap].iter().enumerate() {
        for c in 0..x.ncols() {
            out[(r, c)] = x[(src, c)];
        }
    }
    out
}

fn mean_pairwise_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (n, m) = (a.nrows(), b.nrows());
    let d = a.ncols();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for c in 0..d {
                let diff = a[(i, c)] - b[(j, c)];
                s += diff * diff;
            }
            total += s.sqrt();
        }
    }
    total / (n as f64 * m as f64)
}

/// Energy distance `E_1(X, Y) = 2 E||X-Y|| - E||X-X'|| - E||Y-Y'||` with all
/// expectations taken over every ordered pair (V-statistic), which makes
/// E(X, X) exactly zero. Sets larger than [`ENERGY_SUBSAMPLE`] rows are
/// subsampled with a fixed seed.
pub fn energy_distance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    energy_distance_seeded(x, y, 0)
}

pub fn energy_distance_seeded(x: &DMatrix<f64>, y: &DMatrix<f64>, seed: u64) -> f64 {
    assert_eq!(x.ncols(), y.ncols(), "dimension mismatch");
    let xs = subsample(x, ENERGY_SUBSAMPLE, seed);
    let ys = subsample(y, ENERGY_SUBSAMPLE, seed.wrapping_add(1));
    2.0 * mean_pairwise_distance(&xs, &ys)
        - mean_pairwise_distance(&xs, &xs)
        - mean_pairwise_distance(&ys, &ys)
}

/// Linear-interpolated empirical quantile of one column.
pub fn empirical_quantile(values: &mut [f64], level: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaNs"));
    let h = (values.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        values[lo]
    } else {
        values[lo] + (h - lo as f64) * (values[hi] - values[lo])
    }
}

/// Per-dimension absolute difference of the `level` quantiles of two sample
/// sets (columns are dimensions).
pub fn quantile_delta(x: &DMatrix<f64>, y: &DMatrix<f64>, level: f64) -> DVector<f64> {
    assert_eq!(x.ncols(), y.ncols());
    DVector::from_iterator(
        x.ncols(),
        (0..x.ncols()).map(|c| {
            let mut xc: Vec<f64> = x.column(c).iter().copied().collect();
            let mut yc: Vec<f64> = y.column(c).iter().copied().collect();
            (empirical_quantile(&mut xc, level) - empirical_quantile(&mut yc, level)).abs()
        }),
    )
}

/// Per-dimension absolute difference of the means of two sample sets.
pub fn mean_delta(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
    assert_eq!(x.ncols(), y.ncols());
    DVector::from_iterator(
        x.ncols(),
        (0..x.ncols()).map(|c| {
            let mx = x.column(c).sum() / x.nrows() as f64;
            let my = y.column(c).sum() / y.nrows() as f64;
            (mx - my).abs()
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{loop_prior, make_loop_grid};
    use crate::solver::{solve, SolverConfig};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn psi_vanishes_at_exact_solutions_and_grows_quadratically() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let qs_raw = prior.sample(5, 21).unwrap();
        let cfg = SolverConfig::tight();
        let dim = topo.layout().dim();
        let mut states = DMatrix::zeros(5, dim);
        for r in 0..5 {
            let (s, _) =
                solve(&HeatExchangeVector::new(qs_raw.row(r).transpose()), &topo, &cfg).unwrap();
            for c in 0..dim {
                states[(r, c)] = s.values[c];
            }
        }
        let base = psi(&states, &qs_raw, &topo);
        assert!(base <= 1e-10 * dim as f64, "psi at solutions: {base}");

        // perturb one node temperature: psi grows ~ delta^2
        let lay = topo.layout();
        let idx = lay.index_of("T:s_b").unwrap();
        let mut grow = Vec::new();
        for delta in [1e-3, 2e-3, 4e-3] {
            let mut p = states.clone();
            p[(0, idx)] += delta;
            grow.push(psi(&p, &qs_raw, &topo) - base);
        }
        let r1 = grow[1] / grow[0];
        let r2 = grow[2] / grow[1];
        assert!((r1 - 4.0).abs() < 0.2, "quadratic growth ratio {r1}");
        assert!((r2 - 4.0).abs() < 0.2, "quadratic growth ratio {r2}");
    }

    #[test]
    fn mae_mape_trivial_cases() {
        let topo = make_loop_grid();
        let dim = topo.layout().dim();
        let truth = DMatrix::from_fn(3, dim, |r, c| 1.0 + (r + c) as f64);
        let report = mae_mape(&truth, &truth, &topo);
        for (_, v) in report.iter() {
            assert_eq!(v.mae, 0.0);
            assert_eq!(v.mape_percent, 0.0);
        }
        // single scalar arithmetic: true 2, pred 2.1
        let mut pred = truth.clone();
        let lay = topo.layout();
        let idx = lay.index_of("T:s_a").unwrap();
        let t_cols = (0..dim).filter(|&i| lay.kind(i) == VarKind::NodeTemperature).count();
        pred[(0, idx)] = truth[(0, idx)] + 0.1 * truth[(0, idx)] / 2.0 * 2.0; // +5% of value
        let rep = mae_mape(&pred, &truth, &topo);
        let t = &rep["T"];
        assert_relative_eq!(
            t.mape_percent,
            5.0 / (3.0 * t_cols as f64),
            max_relative = 1e-9
        );
    }

    #[test]
    fn energy_distance_identities() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 0.5]);
        assert_eq!(energy_distance(&x, &x), 0.0);
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_relative_eq!(energy_distance(&a, &b), 10.0, epsilon = 1e-12);
        // symmetry
        let y = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.5, 0.0]);
        assert_eq!(energy_distance(&x, &y), energy_distance(&y, &x));
    }

    #[test]
    fn energy_distance_of_equal_gaussians_is_small() {
        let mut rng = crate::util::stream_rng(33, 0);
        let n = 10_000;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = energy_distance(&x, &y);
        assert!(e.abs() <= 0.02, "energy distance {e}");
        assert!(e >= -1e-9, "V-statistic should be ~nonnegative, got {e}");
    }

    #[test]
    fn quantile_and_mean_deltas_track_shifts() {
        let mut rng = crate::util::stream_rng(34, 0);
        let n = 20_000;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal) + 1.0);
        let dq = quantile_delta(&x, &y, 0.05);
        assert!((dq[0] - 1.0).abs() < 0.08, "delta q5 {}", dq[0]);
        let dm = mean_delta(&x, &y);
        assert!((dm[0] - 1.0).abs() < 0.03, "delta m {}", dm[0]);
        // identical sets: exactly zero
        assert_eq!(quantile_delta(&x, &x, 0.05)[0], 0.0);
        assert_eq!(mean_delta(&x, &x)[0], 0.0);
        // translation consistency
        let xs = x.map(|v| v + 5.0);
        let ys = y.map(|v| v + 5.0);
        assert_relative_eq!(quantile_delta(&xs, &ys, 0.05)[0], dq[0], epsilon = 1e-9);
    }
}
