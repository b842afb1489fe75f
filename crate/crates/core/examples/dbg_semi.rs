use heatgrid::grid::{make_loop_grid, residual, residual_jacobians};
use heatgrid::grid::residual::{flow_classes_dbg, residual_classified_dbg, residual_jacobians_classified_dbg};
use heatgrid::solver::{presolve, SolverConfig};
use heatgrid::HeatExchangeVector;

fn main() {
    let topo = make_loop_grid();
    let lay = topo.layout();
    let q = HeatExchangeVector::from_slice(&[157.41847226508733, 31.815035641141044, 205.60830749566887, 242.09263499529408]);
    let cfg = SolverConfig::tight();
    let (mut state, _) = presolve(&q, &topo, &cfg).unwrap();
    // run one branch to its root first (as the flip loop would)
    let classes = flow_classes_dbg(&state, &topo);
    for _ in 0..40 {
        let r = residual_classified_dbg(&state, &q, &topo, &classes).unwrap();
        if r.norm_squared() < 1e-22 { break; }
        let (_, d) = residual_jacobians_classified_dbg(&state, &q, &topo, &classes).unwrap();
        let step = d.lu().solve(&(-&r)).unwrap();
        let mut t = 1.0;
        loop {
            let mut cand = state.clone();
            for (slot, &full) in lay.free_indices().iter().enumerate() { cand.values[full] += t * step[slot]; }
            if residual_classified_dbg(&cand, &q, &topo, &classes).unwrap().norm() < r.norm() { state = cand; break; }
            t *= 0.5; if t < 1e-8 { break; }
        }
    }
    println!("branch root true psi: {:.3e}", residual(&state, &q, &topo).unwrap().norm_squared());
    // semismooth Newton on the sign-based residual with deep backtracking
    for it in 0..60 {
        let r = residual(&state, &q, &topo).unwrap();
        let psi = r.norm_squared();
        if it % 5 == 0 || psi < 1e-10 { println!("it {it}: psi={psi:.3e} m_db={:.3e}", state.values[lay.index_of("mdot:s_d->s_b").unwrap()]); }
        if psi < 1e-22 { println!("DONE"); break; }
        let (_, d, _) = residual_jacobians(&state, &q, &topo).unwrap();
        let step = d.lu().solve(&(-&r)).unwrap();
        let mut t = 1.0; let mut ok = false;
        for _ in 0..40 {
            let mut cand = state.clone();
            for (slot, &full) in lay.free_indices().iter().enumerate() { cand.values[full] += t * step[slot]; }
            if residual(&cand, &q, &topo).unwrap().norm() < r.norm() { state = cand; ok = true; break; }
            t *= 0.5;
        }
        if !ok {
            println!("STALL at it {it}: psi={:.3e}", psi);
            let names = heatgrid::grid::residual::equation_names(&topo);
            let mut idx: Vec<usize> = (0..r.len()).collect();
            idx.sort_by(|&a, &b| r[b].abs().partial_cmp(&r[a].abs()).unwrap());
            for k in 0..6 { println!("  {} = {:.4e}", names[idx[k]], r[idx[k]]); }
            for nm in ["mdot:s_d->s_b","mdot:s_a->s_b","mdot:r_b->r_d","mdot:b_in->b_out","T:s_b","T:b_in","Tend:s_d->s_b","Tend:s_a->s_b"] {
                println!("  {nm} = {:.6e}", state.values[lay.index_of(nm).unwrap()]);
            }
            break;
        }
    }
}
