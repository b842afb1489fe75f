//! Posterior comparison reports: per-group energy distance, quantile and mean
//! discrepancies of a candidate posterior against a ground-truth sample set,
//! and their averages over measurement replications.

use super::{energy_distance_seeded, mean_delta, quantile_delta};
use crate::grid::{GridTopology, VarKind};
use crate::inference::SampleSet;
use crate::lse::GaussianStatePosterior;
use nalgebra::DMatrix;
use serde::Serialize;

/// A candidate posterior: either samples or a Gaussian (which is sampled for
/// the sample-based metrics).
pub enum EstimatorOutput {
    Samples(SampleSet),
    Gaussian(GaussianStatePosterior),
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GroupMetrics {
    pub energy_distance: f64,
    pub mean_dq5: f64,
    pub max_dq5: f64,
    pub mean_dm: f64,
    pub max_dm: f64,
}

/// Table-shaped comparison of one candidate against one truth set, computed
/// over the FREE state entries (fixed entries agree by construction).
/// Pressure rows are reported in mbar; everything else in its native unit.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PosteriorMetrics {
    pub combined_energy_distance: f64,
    pub temperature: GroupMetrics,
    pub pressure_mbar: GroupMetrics,
    pub massflow: GroupMetrics,
    pub end_temperature: GroupMetrics,
}

fn free_columns(x: &DMatrix<f64>, topo: &GridTopology, kind: Option<VarKind>) -> DMatrix<f64> {
    let lay = topo.layout();
    let cols: Vec<usize> = lay
        .free_indices()
        .iter()
        .copied()
        .filter(|&i| kind.map(|k| lay.kind(i) == k).unwrap_or(true))
        .collect();
    let mut out = DMatrix::zeros(x.nrows(), cols.len());
    for (c, &full) in cols.iter().enumerate() {
        for r in 0..x.nrows() {
            out[(r, c)] = x[(r, full)];
        }
    }
    out
}

fn group_metrics(
    cand: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    topo: &GridTopology,
    kind: VarKind,
    unit_scale: f64,
    seed: u64,
) -> GroupMetrics {
    let a = free_columns(cand, topo, Some(kind)) * unit_scale;
    let b = free_columns(truth, topo, Some(kind)) * unit_scale;
    if a.ncols() == 0 {
        return GroupMetrics::default();
    }
    let dq5 = quantile_delta(&a, &b, 0.05);
    let dm = mean_delta(&a, &b);
    GroupMetrics {
        energy_distance: energy_distance_seeded(&a, &b, seed),
        mean_dq5: dq5.mean(),
        max_dq5: dq5.max(),
        mean_dm: dm.mean(),
        max_dm: dm.max(),
    }
}

/// Compare candidate state samples against truth state samples. Both
/// matrices hold full state rows in layout order.
pub fn posterior_metrics(
    candidate: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    topo: &GridTopology,
    seed: u64,
) -> PosteriorMetrics {
    let all_c = free_columns(candidate, topo, None);
    let all_t = free_columns(truth, topo, None);
    PosteriorMetrics {
        combined_energy_distance: energy_distance_seeded(&all_c, &all_t, seed),
        temperature: group_metrics(candidate, truth, topo, VarKind::NodeTemperature, 1.0, seed),
        pressure_mbar: group_metrics(candidate, truth, topo, VarKind::NodePressure, 1e3, seed),
        massflow: group_metrics(candidate, truth, topo, VarKind::EdgeMassflow, 1.0, seed),
        end_temperature: group_metrics(
            candidate,
            truth,
            topo,
            VarKind::EdgeEndTemperature,
            1.0,
            seed,
        ),
    }
}

/// Averages over measurement replications, with failures counted.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicationReport {
    pub estimator: String,
    pub replications: usize,
    pub failures: usize,
    pub metrics: PosteriorMetrics,
}

/// Average per-replication comparisons of one estimator against per-
/// replication truths. Pairs where the estimator failed are excluded and
/// counted.
pub fn evaluate_posteriors(
    estimator: &str,
    pairs: &[Option<PosteriorMetrics>],
) -> ReplicationReport {
    let ok: Vec<&PosteriorMetrics> = pairs.iter().flatten().collect();
    let n = ok.len().max(1) as f64;
    let avg_group = |f: &dyn Fn(&PosteriorMetrics) -> &GroupMetrics| GroupMetrics {
        energy_distance: ok.iter().map(|m| f(m).energy_distance).sum::<f64>() / n,
        mean_dq5: ok.iter().map(|m| f(m).mean_dq5).sum::<f64>() / n,
        max_dq5: ok.iter().map(|m| f(m).max_dq5).sum::<f64>() / n,
        mean_dm: ok.iter().map(|m| f(m).mean_dm).sum::<f64>() / n,
        max_dm: ok.iter().map(|m| f(m).max_dm).sum::<f64>() / n,
    };
    ReplicationReport {
        estimator: estimator.to_string(),
        replications: pairs.len(),
        failures: pairs.iter().filter(|p| p.is_none()).count(),
        metrics: PosteriorMetrics {
            combined_energy_distance: ok
                .iter()
                .map(|m| m.combined_energy_distance)
                .sum::<f64>()
                / n,
            temperature: avg_group(&|m| &m.temperature),
            pressure_mbar: avg_group(&|m| &m.pressure_mbar),
            massflow: avg_group(&|m| &m.massflow),
            end_temperature: avg_group(&|m| &m.end_temperature),
        },
    }
}

impl ReplicationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Markdown table over several estimator reports, one metric per row.
pub fn reports_to_markdown(reports: &[ReplicationReport]) -> String {
    let mut s = String::new();
    s.push_str("| metric |");
    for r in reports {
        s.push_str(&format!(" {} |", r.estimator));
    }
    s.push_str("\n|---|");
    for _ in reports {
        s.push_str("---|");
    }
    s.push('\n');
    let mut row = |name: &str, f: &dyn Fn(&PosteriorMetrics) -> f64| {
        s.push_str(&format!("| {name} |"));
        for r in reports {
            s.push_str(&format!(" {:.4} |", f(&r.metrics)));
        }
        s.push('\n');
    };
    row("combined E1", &|m| m.combined_energy_distance);
    for (label, get) in [
        ("T [degC]", (|m: &PosteriorMetrics| &m.temperature) as fn(&PosteriorMetrics) -> &GroupMetrics),
        ("p [mbar]", |m: &PosteriorMetrics| &m.pressure_mbar),
        ("mdot [kg/s]", |m: &PosteriorMetrics| &m.massflow),
        ("Tend [degC]", |m: &PosteriorMetrics| &m.end_temperature),
    ] {
        row(&format!("{label} E1"), &|m| get(m).energy_distance);
        row(&format!("{label} mean dq5"), &|m| get(m).mean_dq5);
        row(&format!("{label} max dq5"), &|m| get(m).max_dq5);
        row(&format!("{label} mean dm"), &|m| get(m).mean_dm);
        row(&format!("{label} max dm"), &|m| get(m).max_dm);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_loop_grid;

    #[test]
    fn identical_sets_have_zero_metrics() {
        let topo = make_loop_grid();
        let dim = topo.layout().dim();
        let x = DMatrix::from_fn(200, dim, |r, c| (r as f64 * 0.37 + c as f64 * 0.11).sin());
        let m = posterior_metrics(&x, &x, &topo, 0);
        assert_eq!(m.combined_energy_distance, 0.0);
        assert_eq!(m.temperature.mean_dq5, 0.0);
        assert_eq!(m.massflow.max_dm, 0.0);
    }

    #[test]
    fn split_half_truth_sits_near_the_noise_floor() {
        let topo = make_loop_grid();
        let dim = topo.layout().dim();
        let mut rng = crate::util::stream_rng(55, 0);
        use rand::Rng;
        let x = DMatrix::from_fn(4000, dim, |_, _| rng.random::<f64>());
        let a = x.rows(0, 2000).into_owned();
        let b = x.rows(2000, 2000).into_owned();
        let m = posterior_metrics(&a, &b, &topo, 0);
        assert!(m.combined_energy_distance < 0.05, "{}", m.combined_energy_distance);
        assert!(m.temperature.mean_dq5 < 0.05);
    }

    #[test]
    fn averaging_counts_failures() {
        let a = PosteriorMetrics { combined_energy_distance: 2.0, ..Default::default() };
        let b = PosteriorMetrics { combined_energy_distance: 4.0, ..Default::default() };
        let rep = evaluate_posteriors("x", &[Some(a), None, Some(b)]);
        assert_eq!(rep.failures, 1);
        assert_eq!(rep.replications, 3);
        approx::assert_relative_eq!(rep.metrics.combined_energy_distance, 3.0);
    }
}
