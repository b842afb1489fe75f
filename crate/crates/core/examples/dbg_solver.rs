use heatgrid::grid::{loop_prior, make_loop_grid, implied_heat_exchange};
use heatgrid::solver::{solve, SolverConfig};
use heatgrid::HeatExchangeVector;
use rayon::prelude::*;

fn main() {
    let topo = make_loop_grid();
    let prior = loop_prior();
    let qs = prior.sample(5000, 12345).unwrap();
    let cfg = SolverConfig::tight();
    let lay = topo.layout();
    let results: Vec<(usize, String)> = (0..qs.nrows()).into_par_iter().filter_map(|i| {
        let q = HeatExchangeVector::new(qs.row(i).transpose());
        match solve(&q, &topo, &cfg) {
            Ok((state, rep)) if rep.converged => {
                // verify the row-level guarantees the acceptance needs
                for n in 0..topo.nodes().len() {
                    let mut s = 0.0;
                    for (e, er) in topo.edges().iter().enumerate() {
                        if er.from == n { s += state.mdot(lay, e); }
                        else if er.to == n { s -= state.mdot(lay, e); }
                    }
                    if s.abs() > 1e-8 { return Some((i, format!("mass violation {s:.2e}"))); }
                }
                let back = implied_heat_exchange(&state, &topo);
                for j in 0..4 {
                    let rel = (back.values[j] - q.values[j]).abs() / q.values[j].abs().max(1e-12);
                    if rel > 1e-6 { return Some((i, format!("round-trip rel {rel:.2e} at q={:.3}", q.values[j]))); }
                }
                None
            }
            Ok((_, rep)) => Some((i, format!("not converged psi={:.3e} it={}", rep.psi, rep.nr_iterations))),
            Err(e) => Some((i, format!("{e}"))),
        }
    }).collect();
    for (i, msg) in results.iter().take(8) { println!("draw {i}: {msg}"); }
    println!("total fails: {}/5000", results.len());
}
