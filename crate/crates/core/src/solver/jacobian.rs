//! Exact sensitivity of the solved state with respect to the heat exchanges,
//! via the implicit function theorem: J = -(de/dx)^-1 de/dq at the solution.

use super::{solve, SolverConfig};
use crate::error::SolveError;
use crate::grid::{residual_jacobians, GridState, GridTopology, HeatExchangeVector};
use nalgebra::DMatrix;

/// dh/dq at a solved state, expanded over the full state layout. Rows of
/// fixed entries (setpoints) are identically zero.
pub fn jacobian_at(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
) -> Result<DMatrix<f64>, SolveError> {
    let lay = topo.layout();
    let (_, d_free, d_q) = residual_jacobians(state, q, topo)?;
    let lu = d_free.lu();
    let j_free = lu.solve(&d_q).ok_or(SolveError::SingularJacobian {
        equation: "state Jacobian at a flow-reversal manifold".into(),
    })?;
    let mut full = DMatrix::zeros(lay.dim(), topo.q_dim());
    for (slot, &fullrow) in lay.free_indices().iter().enumerate() {
        for c in 0..topo.q_dim() {
            full[(fullrow, c)] = -j_free[(slot, c)];
        }
    }
    Ok(full)
}

/// Solve at `q` and return dh/dq there.
pub fn jacobian_dx_dq(
    q: &HeatExchangeVector,
    topo: &GridTopology,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>, SolveError> {
    let (state, report) = solve(q, topo, cfg)?;
    if !report.converged {
        return Err(SolveError::NotConverged { psi: report.psi, iterations: report.nr_iterations });
    }
    jacobian_at(&state, q, topo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_loop_grid, make_tree_grid};
    use crate::solver::SolverConfig;
    use nalgebra::DVector;

    fn fd_jacobian(
        q: &HeatExchangeVector,
        topo: &GridTopology,
        delta: f64,
    ) -> DMatrix<f64> {
        let cfg = SolverConfig::tight();
        let dim = topo.layout().dim();
        let mut out = DMatrix::zeros(dim, topo.q_dim());
        for c in 0..topo.q_dim() {
            let mut qp = q.clone();
            qp.values[c] += delta;
            let (sp, _) = solve(&qp, topo, &cfg).unwrap();
            let mut qm = q.clone();
            qm.values[c] -= delta;
            let (sm, _) = solve(&qm, topo, &cfg).unwrap();
            for r in 0..dim {
                out[(r, c)] = (sp.values[r] - sm.values[r]) / (2.0 * delta);
            }
        }
        out
    }

    #[test]
    fn matches_central_differences_on_the_loop() {
        let topo = make_loop_grid();
        let q = HeatExchangeVector::from_slice(&[240.0, 25.0, 190.0, 160.0]);
        let cfg = SolverConfig::tight();
        let j = jacobian_dx_dq(&q, &topo, &cfg).unwrap();
        let fd = fd_jacobian(&q, &topo, 0.1);
        let scale = j.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        for r in 0..j.nrows() {
            for c in 0..j.ncols() {
                let (a, b) = (j[(r, c)], fd[(r, c)]);
                let denom = a.abs().max(b.abs()).max(1e-3 * scale);
                assert!(
                    (a - b).abs() / denom <= 1e-4,
                    "entry ({r},{c}): analytic {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn fixed_rows_are_zero() {
        let topo = make_loop_grid();
        let q = HeatExchangeVector::from_slice(&[200.0, 20.0, 200.0, 200.0]);
        let j = jacobian_dx_dq(&q, &topo, &SolverConfig::tight()).unwrap();
        let lay = topo.layout();
        for full in 0..lay.dim() {
            if lay.is_fixed(full) {
                for c in 0..topo.q_dim() {
                    assert_eq!(j[(full, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn tree_column_structure_follows_the_path_to_the_slack() {
        // raising one demand raises the flow on every pipe between it and the
        // plant and leaves off-path pipe flows untouched
        let topo = make_tree_grid(5, 2).unwrap();
        let lay = topo.layout();
        let q = HeatExchangeVector::new(DVector::from_element(5, 150.0));
        let j = jacobian_dx_dq(&q, &topo, &SolverConfig::tight()).unwrap();
        let target = 2usize; // demand #2 (edge d3_in -> d3_out)
        let d = &topo.demand_edges()[target];
        // collect pipes on the unique undirected path d.from -> slack supply node
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; topo.nodes().len()];
        let mut stack = vec![topo.slack_edge().to];
        let mut seen = vec![false; topo.nodes().len()];
        seen[topo.slack_edge().to] = true;
        while let Some(v) = stack.pop() {
            for (e, pe) in topo.passive_edges().iter().enumerate() {
                for (a, b) in [(pe.from, pe.to), (pe.to, pe.from)] {
                    if a == v && !seen[b] {
                        seen[b] = true;
                        parent[b] = Some((v, e));
                        stack.push(b);
                    }
                }
            }
        }
        let mut on_path = vec![false; topo.passive_edges().len()];
        let mut v = d.from;
        while let Some((p, e)) = parent[v] {
            on_path[e] = true;
            v = p;
            if v == topo.slack_edge().to {
                break;
            }
        }
        assert!(on_path.iter().any(|&b| b));
        for (e, pe) in topo.passive_edges().iter().enumerate() {
            let sens = j[(lay.mdot(e), target)];
            let supply_side = matches!(topo.nodes()[pe.from].side, Some(crate::grid::Side::Supply));
            if !supply_side {
                continue;
            }
            if on_path[e] {
                assert!(sens > 1e-6, "path pipe {e} has sensitivity {sens}");
            } else {
                assert!(sens.abs() < 1e-9, "off-path pipe {e} has sensitivity {sens}");
            }
        }
    }
}
