//! The steady-state residual operator e(x, q, eta) and its analytic partials.
//!
//! One residual per free equation, in the order: mass conservation per node
//! (the slack inlet node is dropped; its row is linearly dependent), thermal
//! mixing per node, pressure loss and heat loss per passive pipe, and the
//! heat-exchange equation per demand and source edge. All residuals are exactly
//! zero at a physical solution.

use super::{EdgeKind, EdgeRef, GridState, GridTopology, HeatExchangeVector};
use crate::error::SolveError;
use nalgebra::{DMatrix, DVector};

/// Total inflow below this is treated as stagnant: the mixing residual is
/// replaced by `T_i - T_a` to keep the system nonsingular.
pub const STAGNANT_FLOW_EPS: f64 = 1e-9;
/// Regularisation floor for the d/dm slope of `k*m*|m|`, which vanishes at
/// m = 0 and would make the Jacobian singular at flow reversal.
pub const PRESSURE_SLOPE_FLOOR: f64 = 1e-6;
/// Floor [K] on the temperature lift in the heat-exchange Jacobian row; the
/// row degenerates when a tiny demand's inlet cools to its outlet setpoint.
/// Inactive at physical lifts (tens of kelvin), so exact sensitivities away
/// from that manifold are unaffected.
pub const EXCHANGE_SLOPE_FLOOR_K: f64 = 0.5;

/// Heat-loss outlet temperature of a pipe: inlet `t_in`, flow magnitude
/// `m_abs` [kg/s]. `lambda` is W/(m K) while cp is kJ/(kg K), hence the 1e3.
pub fn pipe_outlet_temperature(
    t_in: f64,
    m_abs: f64,
    length_m: f64,
    lambda: f64,
    cp: f64,
    ambient: f64,
) -> f64 {
    if m_abs <= STAGNANT_FLOW_EPS {
        return ambient;
    }
    let decay = (-(length_m * lambda) / (1e3 * cp * m_abs)).exp();
    (t_in - ambient) * decay + ambient
}

/// Human-readable names of the residual rows, aligned with [`residual`].
pub fn equation_names(topo: &GridTopology) -> Vec<String> {
    let nodes = topo.nodes();
    let mut names = Vec::new();
    for (i, n) in nodes.iter().enumerate() {
        if i != topo.slack_edge().from {
            names.push(format!("mass:{}", n.id));
        }
    }
    for n in nodes {
        names.push(format!("mix:{}", n.id));
    }
    for e in topo.passive_edges() {
        names.push(format!("ploss:{}->{}", nodes[e.from].id, nodes[e.to].id));
    }
    for e in topo.passive_edges() {
        names.push(format!("tloss:{}->{}", nodes[e.from].id, nodes[e.to].id));
    }
    for name in topo.q_names() {
        names.push(format!("qeq:{name}"));
    }
    names
}

fn check_dims(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
) -> Result<(), SolveError> {
    if state.values.len() != topo.layout().dim() {
        return Err(SolveError::Dimension(format!(
            "state has {} entries, layout expects {}",
            state.values.len(),
            topo.layout().dim()
        )));
    }
    if q.dim() != topo.q_dim() {
        return Err(SolveError::Dimension(format!(
            "heat-exchange vector has {} entries, topology has {}",
            q.dim(),
            topo.q_dim()
        )));
    }
    Ok(())
}

/// Evaluate the residual vector. The mixing equation is evaluated in
/// multiply-through form `T_i * sum_in(m) - sum_in(m * Tend)` with incoming
/// edges classified by the sign of the current flow.
pub fn residual(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
) -> Result<DVector<f64>, SolveError> {
    check_dims(state, q, topo)?;
    Ok(assemble(state, q, topo, None, None))
}

/// Residual together with its analytic partials: `d_free` is de/dx restricted
/// to FREE columns (square), `d_q` is de/dq.
pub fn residual_jacobians(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), SolveError> {
    check_dims(state, q, topo)?;
    let lay = topo.layout();
    let n_eq = lay.free_dim();
    let mut d_free = DMatrix::zeros(n_eq, n_eq);
    let mut d_q = DMatrix::zeros(n_eq, topo.q_dim());
    let r = assemble(state, q, topo, None, Some((&mut d_free, &mut d_q)));
    Ok((r, d_free, d_q))
}

/// Per-edge flow direction classification: +1 flows along the canonical
/// orientation, -1 against it. Freezing the classification removes the sign
/// kinks from the residual so Newton can converge on one smooth branch; the
/// branch is the true solution once every flow sign agrees with its class.
pub(crate) fn flow_classes(state: &GridState, topo: &GridTopology) -> Vec<i8> {
    let lay = topo.layout();
    (0..topo.edges().len())
        .map(|e| if state.mdot(lay, e) >= 0.0 { 1 } else { -1 })
        .collect()
}

/// Classes consistent with the state's flow signs (zero-ish flows match any).
pub(crate) fn classes_consistent(state: &GridState, topo: &GridTopology, classes: &[i8]) -> bool {
    let lay = topo.layout();
    (0..topo.edges().len()).all(|e| {
        let m = state.mdot(lay, e);
        m.abs() <= 1e-12 || (m >= 0.0) == (classes[e] > 0)
    })
}

/// Residual and partials on the smooth branch selected by `classes`.
pub(crate) fn residual_jacobians_classified(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
    classes: &[i8],
) -> Result<(DVector<f64>, DMatrix<f64>), SolveError> {
    check_dims(state, q, topo)?;
    let lay = topo.layout();
    let n_eq = lay.free_dim();
    let mut d_free = DMatrix::zeros(n_eq, n_eq);
    let mut d_q = DMatrix::zeros(n_eq, topo.q_dim());
    let r = assemble(state, q, topo, Some(classes), Some((&mut d_free, &mut d_q)));
    Ok((r, d_free))
}

pub(crate) fn residual_classified(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
    classes: &[i8],
) -> Result<DVector<f64>, SolveError> {
    check_dims(state, q, topo)?;
    Ok(assemble(state, q, topo, Some(classes), None))
}

fn assemble(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
    classes: Option<&[i8]>,
    mut jac: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>,
) -> DVector<f64> {
    let lay = topo.layout();
    let nodes = topo.nodes();
    let edges = topo.edges();
    let cp = topo.cp();
    let t_a = topo.ambient_temperature();
    let n_eq = lay.free_dim();
    let mut r = DVector::zeros(n_eq);
    let mut row = 0usize;

    let set = |jac: &mut Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>,
                   row: usize,
                   full_col: usize,
                   v: f64| {
        if let Some((d_free, _)) = jac {
            if let Some(slot) = lay.free_slot(full_col) {
                d_free[(row, slot)] += v;
            }
        }
    };

    // mass conservation, slack inlet node dropped
    let dropped = topo.slack_edge().from;
    for i in 0..nodes.len() {
        if i == dropped {
            continue;
        }
        let mut s = 0.0;
        for (e, er) in edges.iter().enumerate() {
            if er.from == i {
                s += state.mdot(lay, e);
                set(&mut jac, row, lay.mdot(e), 1.0);
            } else if er.to == i {
                s -= state.mdot(lay, e);
                set(&mut jac, row, lay.mdot(e), -1.0);
            }
        }
        r[row] = s;
        row += 1;
    }

    // thermal mixing: an edge feeds the node at its downstream end. Without a
    // frozen classification the downstream end follows the current flow sign;
    // with one it is pinned, and a transiently wrong-signed flow contributes
    // a negative weight on the same smooth branch.
    let inflow_sign = |e: usize, er: &EdgeRef, i: usize| -> Option<f64> {
        match classes {
            None => {
                let m = state.mdot(lay, e);
                if er.to == i && m > 0.0 {
                    Some(1.0)
                } else if er.from == i && m < 0.0 {
                    Some(-1.0)
                } else {
                    None
                }
            }
            Some(cls) => {
                if er.to == i && cls[e] > 0 {
                    Some(1.0)
                } else if er.from == i && cls[e] < 0 {
                    Some(-1.0)
                } else {
                    None
                }
            }
        }
    };
    for i in 0..nodes.len() {
        let t_i = state.t(lay, i);
        let mut inflow = 0.0;
        for (e, er) in edges.iter().enumerate() {
            if let Some(s) = inflow_sign(e, er, i) {
                inflow += s * state.mdot(lay, e);
            }
        }
        if inflow <= STAGNANT_FLOW_EPS {
            r[row] = t_i - t_a;
            set(&mut jac, row, lay.t(i), 1.0);
            row += 1;
            continue;
        }
        let mut val = 0.0;
        for (e, er) in edges.iter().enumerate() {
            let Some(s) = inflow_sign(e, er, i) else { continue };
            let m = state.mdot(lay, e);
            let tend = state.tend(lay, e);
            let w = s * m;
            val += w * (t_i - tend);
            set(&mut jac, row, lay.mdot(e), s * (t_i - tend));
            set(&mut jac, row, lay.tend(e), -w);
        }
        r[row] = val;
        set(&mut jac, row, lay.t(i), inflow);
        row += 1;
    }

    // pressure loss over passive pipes
    for (e, pe) in topo.passive_edges().iter().enumerate() {
        let m = state.mdot(lay, e);
        r[row] = state.p(lay, pe.from) - state.p(lay, pe.to) - pe.k * m * m.abs();
        set(&mut jac, row, lay.p(pe.from), 1.0);
        set(&mut jac, row, lay.p(pe.to), -1.0);
        set(&mut jac, row, lay.mdot(e), -2.0 * pe.k * m.abs().max(PRESSURE_SLOPE_FLOOR));
        row += 1;
    }

    // heat loss over passive pipes, flow-direction aware. On a frozen branch
    // the along-flow magnitude `class * m` can dip below zero; the decay is
    // extended by zero there (a stagnant pipe relaxes to ambient), which is
    // the smooth limit of exp(-c/x) at x -> 0+.
    for (e, pe) in topo.passive_edges().iter().enumerate() {
        let m = state.mdot(lay, e);
        let dir = match classes {
            None => {
                if m >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Some(cls) => cls[e] as f64,
        };
        let upstream = if dir > 0.0 { pe.from } else { pe.to };
        let t_up = state.t(lay, upstream);
        let along = dir * m;
        let tend = state.tend(lay, e);
        if along <= STAGNANT_FLOW_EPS {
            r[row] = tend - t_a;
            set(&mut jac, row, lay.tend(e), 1.0);
            row += 1;
            continue;
        }
        let c = pe.length_m * pe.lambda / (1e3 * cp);
        let decay = (-c / along).exp();
        r[row] = tend - ((t_up - t_a) * decay + t_a);
        set(&mut jac, row, lay.tend(e), 1.0);
        set(&mut jac, row, lay.t(upstream), -decay);
        let ddecay_dm = dir * decay * c / (along * along);
        set(&mut jac, row, lay.mdot(e), -(t_up - t_a) * ddecay_dm);
        row += 1;
    }

    // heat exchange at demands and sources: q = m cp (T_from - Tend)
    for qi in 0..topo.q_dim() {
        let e = topo.q_edge(qi);
        let er = edges[e];
        debug_assert!(matches!(er.kind, EdgeKind::Demand | EdgeKind::Source));
        let m = state.mdot(lay, e);
        let t_from = state.t(lay, er.from);
        let tend = state.tend(lay, e);
        r[row] = q.values[qi] - m * cp * (t_from - tend);
        let lift = t_from - tend;
        let lift_reg = if matches!(er.kind, EdgeKind::Demand) {
            lift.max(EXCHANGE_SLOPE_FLOOR_K)
        } else {
            lift.min(-EXCHANGE_SLOPE_FLOOR_K)
        };
        set(&mut jac, row, lay.mdot(e), -cp * lift_reg);
        set(&mut jac, row, lay.t(er.from), -m * cp);
        if let Some((_, d_q)) = &mut jac {
            d_q[(row, qi)] = 1.0;
        }
        row += 1;
    }

    debug_assert_eq!(row, n_eq);
    r
}

/// Heat exchange implied by a state: `q_ij = m_ij cp (T_i - Tend_ij)` per
/// demand and source edge. Round-trips with the solver.
pub fn implied_heat_exchange(state: &GridState, topo: &GridTopology) -> HeatExchangeVector {
    let lay = topo.layout();
    let cp = topo.cp();
    let values = DVector::from_iterator(
        topo.q_dim(),
        (0..topo.q_dim()).map(|qi| {
            let e = topo.q_edge(qi);
            let er = topo.edges()[e];
            state.mdot(lay, e) * cp * (state.t(lay, er.from) - state.tend(lay, e))
        }),
    );
    HeatExchangeVector { values }
}


// debug-only public shims
#[doc(hidden)]
pub fn flow_classes_dbg(state: &GridState, topo: &GridTopology) -> Vec<i8> {
    flow_classes(state, topo)
}
#[doc(hidden)]
pub fn classes_consistent_dbg(state: &GridState, topo: &GridTopology, classes: &[i8]) -> bool {
    classes_consistent(state, topo, classes)
}
#[doc(hidden)]
pub fn residual_classified_dbg(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
    classes: &[i8],
) -> Result<DVector<f64>, SolveError> {
    residual_classified(state, q, topo, classes)
}
#[doc(hidden)]
pub fn residual_jacobians_classified_dbg(
    state: &GridState,
    q: &HeatExchangeVector,
    topo: &GridTopology,
    classes: &[i8],
) -> Result<(DVector<f64>, DMatrix<f64>), SolveError> {
    residual_jacobians_classified(state, q, topo, classes)
}
