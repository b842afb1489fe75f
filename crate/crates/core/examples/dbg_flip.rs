use heatgrid::grid::{make_loop_grid, residual};
use heatgrid::grid::residual::{flow_classes_dbg, residual_jacobians_classified_dbg, residual_classified_dbg, classes_consistent_dbg};
use heatgrid::solver::{presolve, SolverConfig};
use heatgrid::HeatExchangeVector;

fn branch(state: &mut heatgrid::GridState, q: &HeatExchangeVector, topo: &heatgrid::GridTopology, classes: &[i8]) -> usize {
    let lay = topo.layout();
    for it in 0..80 {
        let r = residual_classified_dbg(state, q, topo, classes).unwrap();
        if r.norm_squared() <= 1e-22 { return it; }
        let (_, d) = residual_jacobians_classified_dbg(state, q, topo, classes).unwrap();
        let step = match d.lu().solve(&(-&r)) { Some(s) => s, None => return it };
        let mut t = 1.0; let mut ok = false;
        for _ in 0..=10 {
            let mut cand = state.clone();
            for (slot, &full) in lay.free_indices().iter().enumerate() { cand.values[full] += t * step[slot]; }
            if residual_classified_dbg(&cand, q, topo, classes).unwrap().norm() < r.norm() { *state = cand; ok = true; break; }
            t *= 0.5;
        }
        if !ok { return it; }
    }
    80
}

fn main() {
    let topo = make_loop_grid();
    let lay = topo.layout();
    let q = HeatExchangeVector::from_slice(&[127.74840534640144, 3.3101754385861852, 210.3408912421428, 164.72753869212158]);
    let cfg = SolverConfig::tight();
    let (mut state, _) = presolve(&q, &topo, &cfg).unwrap();
    let mut classes = flow_classes_dbg(&state, &topo);
    for round in 0..12 {
        let its = branch(&mut state, &q, &topo, &classes);
        let psi_true = residual(&state, &q, &topo).unwrap().norm_squared();
        let cons = classes_consistent_dbg(&state, &topo, &classes);
        // show violating edges
        let mut viol = String::new();
        for e in 0..topo.edges().len() {
            let m = state.values[lay.mdot(e)];
            if m.abs() > 1e-12 && ((m >= 0.0) != (classes[e] > 0)) {
                viol += &format!(" {}={:.2e}", lay.name(lay.mdot(e)), m);
            }
        }
        println!("round {round}: branch {its} its, psi_true={psi_true:.2e}, consistent={cons}, violations:{viol}");
        if cons { break; }
        for e in 0..topo.edges().len() {
            let m = state.values[lay.mdot(e)];
            if m.abs() > 1e-9 { classes[e] = if m >= 0.0 { 1 } else { -1 }; }
        }
    }
}
