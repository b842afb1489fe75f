//! Built-in grids: the 18-node loop test case and a seeded radial generator.

use super::{ActiveEdge, GridTopology, Node, PassiveEdge, Side, SlackEdge};
use crate::inference::TruncatedNormalPrior;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const RING_K: f64 = 0.028;
const RING_LAMBDA: f64 = 0.2325;
const SUPPLY_T: f64 = 120.0;
const SUPPLY_P: f64 = 6.5;
const RETURN_P: f64 = 3.0;
const AMBIENT: f64 = 10.0;
const CP: f64 = 4.18;

/// The 18-node ring grid: one heating plant and four demands A..D placed on a
/// loop, long (300 m) ring and plant mains, short (70 m) consumer stubs. The
/// in-loop pipe is oriented d->b so its flow is positive when demand A
/// dominates demand D.
pub fn make_loop_grid() -> GridTopology {
    let sup = |id: &str| Node { id: id.into(), side: Some(Side::Supply) };
    let ret = |id: &str| Node { id: id.into(), side: Some(Side::Return) };
    let nodes = vec![
        sup("hp_s"),
        sup("s_c"),
        sup("s_a"),
        sup("s_b"),
        sup("s_d"),
        sup("a_in"),
        sup("b_in"),
        sup("c_in"),
        sup("d_in"),
        ret("a_out"),
        ret("b_out"),
        ret("c_out"),
        ret("d_out"),
        ret("r_a"),
        ret("r_b"),
        ret("r_c"),
        ret("r_d"),
        ret("hp_r"),
    ];
    let ix = |id: &str| nodes.iter().position(|n| n.id == id).unwrap();
    let pipe = |a: &str, b: &str, l: f64| PassiveEdge {
        from: ix(a),
        to: ix(b),
        length_m: l,
        k: RING_K,
        lambda: RING_LAMBDA,
    };
    let passive = vec![
        pipe("hp_s", "s_c", 300.0),
        pipe("s_c", "s_a", 300.0),
        pipe("s_a", "s_b", 300.0),
        pipe("s_d", "s_b", 300.0),
        pipe("s_c", "s_d", 300.0),
        pipe("s_a", "a_in", 70.0),
        pipe("s_b", "b_in", 70.0),
        pipe("s_c", "c_in", 70.0),
        pipe("s_d", "d_in", 70.0),
        pipe("a_out", "r_a", 70.0),
        pipe("b_out", "r_b", 70.0),
        pipe("c_out", "r_c", 70.0),
        pipe("d_out", "r_d", 70.0),
        pipe("r_a", "r_c", 300.0),
        pipe("r_b", "r_a", 300.0),
        pipe("r_b", "r_d", 300.0),
        pipe("r_d", "r_c", 300.0),
        pipe("r_c", "hp_r", 300.0),
    ];
    let demand = |a: &str, b: &str, t: f64| ActiveEdge { from: ix(a), to: ix(b), t_set_c: t };
    let demands = vec![
        demand("a_in", "a_out", 50.0),
        demand("b_in", "b_out", 60.0),
        demand("c_in", "c_out", 55.0),
        demand("d_in", "d_out", 40.0),
    ];
    let slack = SlackEdge {
        from: ix("hp_r"),
        to: ix("hp_s"),
        t_set_c: SUPPLY_T,
        p_set_supply_bar: SUPPLY_P,
        p_set_return_bar: RETURN_P,
    };
    GridTopology::new(nodes, passive, demands, Vec::new(), slack, AMBIENT, CP)
        .expect("loop fixture is valid")
}

/// Demand prior of the loop grid: means (200, 20, 200, 200) kW, variances
/// (7000, 100, 100, 7000) kW^2, and a -0.9 cross-correlation between A and C.
pub fn loop_prior() -> TruncatedNormalPrior {
    let mean = DVector::from_row_slice(&[200.0, 20.0, 200.0, 200.0]);
    let mut cov = DMatrix::zeros(4, 4);
    cov[(0, 0)] = 7000.0;
    cov[(1, 1)] = 100.0;
    cov[(2, 2)] = 100.0;
    cov[(3, 3)] = 7000.0;
    let c_ac = -0.9 * 7000f64.sqrt() * 100f64.sqrt();
    cov[(0, 2)] = c_ac;
    cov[(2, 0)] = c_ac;
    TruncatedNormalPrior::new(mean, cov, 4, 0).expect("loop prior is valid")
}

/// Deterministic radial grid with `n_demands` consumers hanging off a randomly
/// grown supply tree (mirrored on the return side). `n_demands = 1` yields the
/// minimal plant--pipe--demand--pipe loop-free grid.
pub fn make_tree_grid(n_demands: usize, seed: u64) -> Result<GridTopology, crate::error::TopologyError> {
    if n_demands < 1 {
        return Err(crate::error::TopologyError::Invalid(vec![
            "a tree grid needs at least one demand".into(),
        ]));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut nodes = vec![
        Node { id: "hp_s".into(), side: Some(Side::Supply) },
        Node { id: "hp_r".into(), side: Some(Side::Return) },
    ];
    // supply attach points together with their return-side mirrors
    let mut attach: Vec<(usize, usize)> = vec![(0, 1)];
    let mut passive = Vec::new();
    let mut demands = Vec::new();
    for i in 1..=n_demands {
        let (parent_s, parent_r) = attach[rng.random_range(0..attach.len())];
        let length = rng.random_range(50.0..400.0_f64).round();
        let k = (rng.random_range(0.015..0.045_f64) * 1e3).round() / 1e3;
        let t_ret = rng.random_range(40.0..60.0_f64).round();
        let s_in = nodes.len();
        nodes.push(Node { id: format!("d{i}_in"), side: Some(Side::Supply) });
        let s_out = nodes.len();
        nodes.push(Node { id: format!("d{i}_out"), side: Some(Side::Return) });
        passive.push(PassiveEdge {
            from: parent_s,
            to: s_in,
            length_m: length,
            k,
            lambda: RING_LAMBDA,
        });
        passive.push(PassiveEdge {
            from: s_out,
            to: parent_r,
            length_m: length,
            k,
            lambda: RING_LAMBDA,
        });
        demands.push(ActiveEdge { from: s_in, to: s_out, t_set_c: t_ret });
        attach.push((s_in, s_out));
    }
    let slack = SlackEdge {
        from: 1,
        to: 0,
        t_set_c: SUPPLY_T,
        p_set_supply_bar: SUPPLY_P,
        p_set_return_bar: RETURN_P,
    };
    GridTopology::new(nodes, passive, demands, Vec::new(), slack, AMBIENT, CP)
}

/// Diagonal demand prior for a generated tree grid, deterministic for a seed:
/// means uniform in [80, 280] kW, standard deviation 25% of the mean.
pub fn tree_prior(n_demands: usize, seed: u64) -> TruncatedNormalPrior {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7e3e_7019_0000_0001);
    let mean = DVector::from_iterator(
        n_demands,
        (0..n_demands).map(|_| (rng.random_range(80.0..280.0_f64) * 10.0).round() / 10.0),
    );
    let mut cov = DMatrix::zeros(n_demands, n_demands);
    for i in 0..n_demands {
        let sd = 0.25 * mean[i];
        cov[(i, i)] = sd * sd;
    }
    TruncatedNormalPrior::new(mean, cov, n_demands, 0).expect("tree prior is valid")
}
