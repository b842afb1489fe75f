use heatgrid::grid::{make_loop_grid, residual};
use heatgrid::grid::residual::{residual_classified_dbg, residual_jacobians_classified_dbg, classes_consistent_dbg, flow_classes_dbg};
use heatgrid::solver::{presolve, SolverConfig};
use heatgrid::HeatExchangeVector;

fn branch(state: &mut heatgrid::GridState, q: &HeatExchangeVector, topo: &heatgrid::GridTopology, classes: &[i8]) {
    let lay = topo.layout();
    for _ in 0..60 {
        let r = residual_classified_dbg(state, q, topo, classes).unwrap();
        if r.norm_squared() < 1e-24 { break; }
        let (_, d) = residual_jacobians_classified_dbg(state, q, topo, classes).unwrap();
        let step = match d.lu().solve(&(-&r)) { Some(s) => s, None => break };
        let mut t = 1.0; let mut ok = false;
        for _ in 0..30 {
            let mut cand = state.clone();
            for (slot, &full) in lay.free_indices().iter().enumerate() { cand.values[full] += t * step[slot]; }
            if residual_classified_dbg(&cand, q, topo, classes).unwrap().norm() < r.norm() { *state = cand; ok = true; break; }
            t *= 0.5;
        }
        if !ok { break; }
    }
}

fn main() {
    let topo = make_loop_grid();
    let lay = topo.layout();
    let q = HeatExchangeVector::from_slice(&[157.41847226508733, 31.815035641141044, 205.60830749566887, 242.09263499529408]);
    let cfg = SolverConfig::tight();
    let (base, _) = presolve(&q, &topo, &cfg).unwrap();
    let db = lay.index_of("mdot:s_d->s_b").unwrap();
    let rbd = lay.index_of("mdot:r_b->r_d").unwrap();
    for (label, nudge) in [("+0.05", 0.05), ("-0.05", -0.05), ("+0.01", 0.01), ("-0.01", -0.01)] {
        let mut state = base.clone();
        state.values[db] = nudge;
        state.values[rbd] = nudge;
        let mut classes = flow_classes_dbg(&state, &topo);
        // freeze the nudged sign on the two loop edges
        branch(&mut state, &q, &topo, &classes);
        let consistent = classes_consistent_dbg(&state, &topo, &classes);
        let psi = residual(&state, &q, &topo).unwrap().norm_squared();
        println!("nudge {label}: consistent={consistent} psi_true={psi:.3e} m_db={:.4e} m_rbd={:.4e}",
            state.values[db], state.values[rbd]);
        let _ = &mut classes;
    }
}
