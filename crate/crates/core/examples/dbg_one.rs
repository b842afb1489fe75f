use heatgrid::grid::{make_loop_grid, residual};
use heatgrid::solver::{presolve, SolverConfig};
use heatgrid::HeatExchangeVector;
use heatgrid::grid::residual::{flow_classes_dbg, residual_classified_dbg, residual_jacobians_classified_dbg};

fn main() {
    let topo = make_loop_grid();
    let q = HeatExchangeVector::from_slice(&[157.41847226508733, 31.815035641141044, 205.60830749566887, 242.09263499529408]);
    let cfg = SolverConfig::tight();
    let (mut state, _) = presolve(&q, &topo, &cfg).unwrap();
    let lay = topo.layout();
    let classes = flow_classes_dbg(&state, &topo);
    let names = heatgrid::grid::residual::equation_names(&topo);
    for it in 0..40 {
        let r = residual_classified_dbg(&state, &q, &topo, &classes).unwrap();
        let mut idx: Vec<usize> = (0..r.len()).collect();
        idx.sort_by(|&a, &b| r[b].abs().partial_cmp(&r[a].abs()).unwrap());
        let (_, d) = residual_jacobians_classified_dbg(&state, &q, &topo, &classes).unwrap();
        let step = d.clone().lu().solve(&(-&r)).unwrap();
        let mut si: Vec<usize> = (0..step.len()).collect();
        si.sort_by(|&a, &b| step[b].abs().partial_cmp(&step[a].abs()).unwrap());
        // svd condition
        let svd = d.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let mut t = 1.0f64; let mut ok=false;
        for _ in 0..=12 {
            let mut cand = state.clone();
            for (slot, &full) in lay.free_indices().iter().enumerate() {
                cand.values[full] += t * step[slot];
            }
            if residual_classified_dbg(&cand, &q, &topo, &classes).unwrap().norm() < r.norm() { state = cand; ok=true; break; }
            t *= 0.5;
        }
        println!("it {it}: |r|={:.3e} worst {}={:.2e} | cond={:.2e} | biggest step {}={:.3e} {}={:.3e} | t={}",
            r.norm(), names[idx[0]], r[idx[0]], smax/smin,
            lay.name(lay.free_indices()[si[0]]), step[si[0]],
            lay.name(lay.free_indices()[si[1]]), step[si[1]], if ok {t} else {-1.0});
        if !ok { println!("STALL; m_db={:.6} m_ab={:.6} m_B={:.6} T_b_in={:.3} T_s_b={:.3}",
            state.values[lay.index_of("mdot:s_d->s_b").unwrap()],
            state.values[lay.index_of("mdot:s_a->s_b").unwrap()],
            state.values[lay.index_of("mdot:b_in->b_out").unwrap()],
            state.values[lay.index_of("T:b_in").unwrap()],
            state.values[lay.index_of("T:s_b").unwrap()]); break; }
        if r.norm_squared() < 1e-16 { println!("CONVERGED"); break; }
    }
}
