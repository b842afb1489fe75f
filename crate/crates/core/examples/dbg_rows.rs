use heatgrid::grid::{make_loop_grid, residual};
use heatgrid::solver::{solve, SolverConfig};
use heatgrid::HeatExchangeVector;

fn main() {
    let topo = make_loop_grid();
    let lay = topo.layout();
    for qv in [
        [144.76135367177756, 0.5912961142889124, 208.76588183727966, 154.82157141838678],
        [127.82596732406897, 3.615414746352265, 205.9612685619997, 129.254401816339],
    ] {
        let q = HeatExchangeVector::from_slice(&qv);
        let (state, rep) = solve(&q, &topo, &SolverConfig::tight()).unwrap();
        let r = residual(&state, &q, &topo).unwrap();
        let names = heatgrid::grid::residual::equation_names(&topo);
        let mut idx: Vec<usize> = (0..r.len()).collect();
        idx.sort_by(|&a, &b| r[b].abs().partial_cmp(&r[a].abs()).unwrap());
        println!("q_B={} psi={:.3e} converged={}", qv[1], rep.psi, rep.converged);
        for k in 0..5 { println!("   {} = {:.3e}", names[idx[k]], r[idx[k]]); }
        for nm in ["mdot:s_d->s_b", "mdot:s_a->s_b", "mdot:r_b->r_d", "mdot:r_b->r_a", "mdot:b_in->b_out"] {
            println!("   {nm} = {:.6e}", state.values[lay.index_of(nm).unwrap()]);
        }
    }
}
