//! Alternating hydraulic/thermal presolver.
//!
//! Starting from the crude initial state, each sweep first solves the
//! hydraulic equations (mass conservation, pipe pressure drops, demand flows
//! from the heat-exchange equation, slack pressure anchors) at frozen
//! temperatures, then the thermal equations (mixing, pipe cooling, outlet
//! setpoints) at frozen flows. Sweeps stop once psi falls below the minimal
//! precision or the relative gain per sweep falls below the minimal gain.
//! The result lands near the root quickly but converges slowly beyond that,
//! which is exactly what the Newton stage wants as a starting point.

use super::SolverConfig;
use crate::error::SolveError;
use crate::grid::residual::{
    pipe_outlet_temperature, PRESSURE_SLOPE_FLOOR, STAGNANT_FLOW_EPS,
};
use crate::grid::{residual, GridState, GridTopology, HeatExchangeVector};
use nalgebra::{DMatrix, DVector};

/// Floor on the temperature lift used to back flows out of the heat-exchange
/// equation. At tiny demands the stub pipe can transiently cool the inlet
/// below the outlet setpoint; clamping keeps the presolve flow positive and
/// of a sane magnitude, and Newton refines from there.
const MIN_ACTIVE_DELTA_T: f64 = 1.0;

pub fn presolve(
    q: &HeatExchangeVector,
    topo: &GridTopology,
    cfg: &SolverConfig,
) -> Result<(GridState, usize), SolveError> {
    if q.dim() != topo.q_dim() {
        return Err(SolveError::Dimension(format!(
            "heat-exchange vector has {} entries, topology has {}",
            q.dim(),
            topo.q_dim()
        )));
    }
    if q.values.iter().all(|v| v.abs() < 1e-12) {
        return Err(SolveError::DegenerateInput(
            "all heat exchanges are zero; the hydraulic state is undetermined".into(),
        ));
    }
    if q.values.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::DegenerateInput("non-finite heat exchange".into()));
    }

    let mut state = topo.initial_state();
    let mut loss = f64::INFINITY;
    let mut iterations = 0usize;
    for _ in 0..50 {
        solve_hydraulic(&mut state, q, topo)?;
        sweep_thermal(&mut state, topo, 20);
        iterations += 1;
        let new_loss = residual(&state, q, topo)?.norm_squared();
        let gain = (loss - new_loss) / loss;
        loss = new_loss;
        if loss < cfg.presolve_min_precision || gain < cfg.presolve_min_gain {
            break;
        }
    }
    Ok((state, iterations))
}

/// Newton solve of the hydraulic subsystem at frozen temperatures. Unknowns
/// are passive-pipe flows, the slack flow, and the free node pressures;
/// demand and source flows follow directly from the heat-exchange equation.
pub(crate) fn solve_hydraulic(
    state: &mut GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
) -> Result<(), SolveError> {
    let lay = topo.layout();
    let cp = topo.cp();
    let n_nodes = topo.nodes().len();
    let n_passive = topo.passive_edges().len();
    let slack_edge = topo.edges().len() - 1;

    // active flows from q at the frozen inlet temperatures; demands expect a
    // positive lift, sources a negative one
    for qi in 0..topo.q_dim() {
        let e = topo.q_edge(qi);
        let er = topo.edges()[e];
        let raw = state.t(lay, er.from) - topo.q_setpoint(qi);
        let dt = if qi < topo.demand_edges().len() {
            raw.max(MIN_ACTIVE_DELTA_T)
        } else {
            raw.min(-MIN_ACTIVE_DELTA_T)
        };
        state.values[lay.mdot(e)] = q.values[qi] / (cp * dt);
    }

    // unknown ordering: passive flows, slack flow, free node pressures
    let mut p_slot = vec![usize::MAX; n_nodes];
    let mut n_unknowns = n_passive + 1;
    for i in 0..n_nodes {
        if !lay.is_fixed(lay.p(i)) {
            p_slot[i] = n_unknowns;
            n_unknowns += 1;
        }
    }
    let dropped = topo.slack_edge().from;

    let eval = |state: &GridState, r: &mut DVector<f64>, jac: Option<&mut DMatrix<f64>>| {
        let mut jac = jac;
        let mut row = 0usize;
        for i in 0..n_nodes {
            if i == dropped {
                continue;
            }
            let mut s = 0.0;
            for (e, er) in topo.edges().iter().enumerate() {
                let sign = if er.from == i {
                    1.0
                } else if er.to == i {
                    -1.0
                } else {
                    continue;
                };
                s += sign * state.mdot(lay, e);
                if let Some(j) = jac.as_deref_mut() {
                    if e < n_passive {
                        j[(row, e)] += sign;
                    } else if e == slack_edge {
                        j[(row, n_passive)] += sign;
                    }
                }
            }
            r[row] = s;
            row += 1;
        }
        for (e, pe) in topo.passive_edges().iter().enumerate() {
            let m = state.mdot(lay, e);
            r[row] = state.p(lay, pe.from) - state.p(lay, pe.to) - pe.k * m * m.abs();
            if let Some(j) = jac.as_deref_mut() {
                j[(row, e)] = -2.0 * pe.k * m.abs().max(PRESSURE_SLOPE_FLOOR);
                if p_slot[pe.from] != usize::MAX {
                    j[(row, p_slot[pe.from])] = 1.0;
                }
                if p_slot[pe.to] != usize::MAX {
                    j[(row, p_slot[pe.to])] = -1.0;
                }
            }
            row += 1;
        }
        debug_assert_eq!(row, n_unknowns);
    };

    let mut r = DVector::zeros(n_unknowns);
    eval(state, &mut r, None);
    for _ in 0..25 {
        if r.norm() <= 1e-11 {
            break;
        }
        let mut jac = DMatrix::zeros(n_unknowns, n_unknowns);
        let mut r0 = DVector::zeros(n_unknowns);
        eval(state, &mut r0, Some(&mut jac));
        let step = jac.lu().solve(&(-&r0)).ok_or(SolveError::SingularJacobian {
            equation: "hydraulic subproblem".into(),
        })?;
        let apply = |state: &mut GridState, t: f64| {
            for e in 0..n_passive {
                state.values[lay.mdot(e)] += t * step[e];
            }
            state.values[lay.mdot(slack_edge)] += t * step[n_passive];
            for i in 0..n_nodes {
                if p_slot[i] != usize::MAX {
                    state.values[lay.p(i)] += t * step[p_slot[i]];
                }
            }
        };
        let norm0 = r0.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let mut cand = state.clone();
            apply(&mut cand, t);
            let mut r_new = DVector::zeros(n_unknowns);
            eval(&cand, &mut r_new, None);
            if r_new.norm() < norm0 {
                *state = cand;
                r = r_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(())
}

/// Fixed-point sweep of the thermal subsystem at frozen flows: pipe outlet
/// temperatures from upstream node temperatures, node temperatures from
/// flow-weighted mixing of incoming outlets. Nodes are visited in
/// topological order of the current flow directions so radial grids settle
/// in one pass; loops iterate to a fixed point.
pub(crate) fn sweep_thermal(state: &mut GridState, topo: &GridTopology, max_sweeps: usize) {
    let lay = topo.layout();
    let cp = topo.cp();
    let t_a = topo.ambient_temperature();
    let n_nodes = topo.nodes().len();
    let n_passive = topo.passive_edges().len();

    // inflow edge list per node under current flow signs
    let mut inflows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_nodes];
    for (e, er) in topo.edges().iter().enumerate() {
        let m = state.mdot(lay, e);
        if m > 0.0 {
            inflows[er.to].push((e, m));
        } else if m < 0.0 {
            inflows[er.from].push((e, -m));
        }
    }
    // Kahn order over the flow digraph; cycle remnants appended afterwards
    let mut indegree: Vec<usize> = inflows.iter().map(|v| v.len()).collect();
    let mut order: Vec<usize> = (0..n_nodes).filter(|&i| indegree[i] == 0).collect();
    let mut head = 0;
    while head < order.len() {
        let i = order[head];
        head += 1;
        for (e, er) in topo.edges().iter().enumerate() {
            let m = state.mdot(lay, e);
            let downstream = if m > 0.0 && er.from == i {
                Some(er.to)
            } else if m < 0.0 && er.to == i {
                Some(er.from)
            } else {
                None
            };
            if let Some(d) = downstream {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    order.push(d);
                }
            }
        }
    }
    for i in 0..n_nodes {
        if !order.contains(&i) {
            order.push(i);
        }
    }

    for _ in 0..max_sweeps {
        let mut max_change = 0.0f64;
        for &i in &order {
            // refresh outlet temperatures of edges flowing into i
            for &(e, _) in &inflows[i] {
                if e >= n_passive {
                    continue; // active outlets are pinned to setpoints
                }
                let pe = &topo.passive_edges()[e];
                let m = state.mdot(lay, e);
                let upstream = if m >= 0.0 { pe.from } else { pe.to };
                let t_new = pipe_outlet_temperature(
                    state.t(lay, upstream),
                    m.abs(),
                    pe.length_m,
                    pe.lambda,
                    cp,
                    t_a,
                );
                max_change = max_change.max((t_new - state.tend(lay, e)).abs());
                state.values[lay.tend(e)] = t_new;
            }
            let total: f64 = inflows[i].iter().map(|&(_, w)| w).sum();
            let t_new = if total <= STAGNANT_FLOW_EPS {
                t_a
            } else {
                inflows[i].iter().map(|&(e, w)| w * state.tend(lay, e)).sum::<f64>() / total
            };
            max_change = max_change.max((t_new - state.t(lay, i)).abs());
            state.values[lay.t(i)] = t_new;
        }
        // outlets of edges that flow nowhere (or out of leaves) still need a value
        for (e, pe) in topo.passive_edges().iter().enumerate() {
            let m = state.mdot(lay, e);
            let upstream = if m >= 0.0 { pe.from } else { pe.to };
            let t_new =
                pipe_outlet_temperature(state.t(lay, upstream), m.abs(), pe.length_m, pe.lambda, cp, t_a);
            state.values[lay.tend(e)] = t_new;
        }
        if max_change < 1e-12 {
            break;
        }
    }
}
