//! Grid graph, state vectors, and the steady-state residual operator.
//!
//! A heating grid is a graph of nodes and edges. Passive edges are pipes with
//! physically determined pressure and heat losses; active edges (demands,
//! sources, one slack generator) exchange heat with the outside world and are
//! governed by control setpoints. The full grid state holds one temperature
//! and pressure per node and one mass flow and outlet temperature per edge.

mod fixtures;
mod layout;
pub mod residual;

pub use fixtures::{loop_prior, make_loop_grid, make_tree_grid, tree_prior};
pub use layout::{StateLayout, VarKind};
pub use residual::{implied_heat_exchange, residual, residual_jacobians};

use crate::error::TopologyError;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Which side of the grid a node belongs to. Informational only; the solver
/// never depends on it, but initial guesses and reports use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Supply,
    Return,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub side: Option<Side>,
}

#[derive(Debug, Clone)]
pub struct PassiveEdge {
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    /// Pressure loss coefficient [bar/(kg/s)^2].
    pub k: f64,
    /// Heat loss coefficient [W/(m K)].
    pub lambda: f64,
}

/// Demand or source edge: outlet temperature pinned to a setpoint, heat
/// exchange prescribed externally.
#[derive(Debug, Clone)]
pub struct ActiveEdge {
    pub from: usize,
    pub to: usize,
    pub t_set_c: f64,
}

#[derive(Debug, Clone)]
pub struct SlackEdge {
    pub from: usize,
    pub to: usize,
    pub t_set_c: f64,
    /// Pressure anchor at the supply-side node (`to`) [bar].
    pub p_set_supply_bar: f64,
    /// Pressure anchor at the return-side node (`from`) [bar].
    pub p_set_return_bar: f64,
}

/// Kinds of edges in the unified edge ordering of a [`StateLayout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Passive,
    Demand,
    Source,
    Slack,
}

/// A single edge in the unified ordering: passive edges first, then demands,
/// sources, and the slack edge last.
#[derive(Debug, Clone, Copy)]
pub struct EdgeRef {
    pub kind: EdgeKind,
    pub from: usize,
    pub to: usize,
}

/// Immutable grid description: graph, physical parameters, and control
/// setpoints. Build one with [`load_topology`], [`make_loop_grid`] or
/// [`make_tree_grid`]; it is cheap to share between threads.
#[derive(Debug, Clone)]
pub struct GridTopology {
    nodes: Vec<Node>,
    passive: Vec<PassiveEdge>,
    demands: Vec<ActiveEdge>,
    sources: Vec<ActiveEdge>,
    slack: SlackEdge,
    ambient_c: f64,
    cp: f64,
    edges: Vec<EdgeRef>,
    layout: StateLayout,
}

impl GridTopology {
    /// Assemble and validate a topology from its parts.
    pub fn new(
        nodes: Vec<Node>,
        passive: Vec<PassiveEdge>,
        demands: Vec<ActiveEdge>,
        sources: Vec<ActiveEdge>,
        slack: SlackEdge,
        ambient_c: f64,
        cp: f64,
    ) -> Result<Self, TopologyError> {
        let mut violations = Vec::new();
        let n = nodes.len();
        {
            let mut seen = HashMap::new();
            for (i, node) in nodes.iter().enumerate() {
                if let Some(prev) = seen.insert(node.id.clone(), i) {
                    violations.push(format!("duplicate node id `{}` (#{prev}, #{i})", node.id));
                }
                if node.id.contains(',') || node.id.contains("->") {
                    violations.push(format!("node id `{}` contains reserved characters", node.id));
                }
            }
        }
        let check_ref = |from: usize, to: usize, what: &str, violations: &mut Vec<String>| {
            if from >= n || to >= n {
                violations.push(format!("{what} references a missing node"));
            } else if from == to {
                violations.push(format!("{what} is a self-loop"));
            }
        };
        for (i, e) in passive.iter().enumerate() {
            check_ref(e.from, e.to, &format!("passive edge #{i}"), &mut violations);
            if !(e.k > 0.0) {
                violations.push(format!("passive edge #{i}: k must be > 0 (got {})", e.k));
            }
            if !(e.length_m > 0.0) {
                violations.push(format!(
                    "passive edge #{i}: length must be > 0 (got {})",
                    e.length_m
                ));
            }
            if !(e.lambda >= 0.0) {
                violations.push(format!(
                    "passive edge #{i}: lambda must be >= 0 (got {})",
                    e.lambda
                ));
            }
        }
        for (i, e) in demands.iter().enumerate() {
            check_ref(e.from, e.to, &format!("demand edge #{i}"), &mut violations);
        }
        for (i, e) in sources.iter().enumerate() {
            check_ref(e.from, e.to, &format!("source edge #{i}"), &mut violations);
        }
        check_ref(slack.from, slack.to, "slack edge", &mut violations);
        if !(cp > 0.0) {
            violations.push(format!("cp must be > 0 (got {cp})"));
        }

        // connectivity over the undirected graph
        if n > 0 && violations.is_empty() {
            let mut adj = vec![Vec::new(); n];
            let add = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| {
                adj[a].push(b);
                adj[b].push(a);
            };
            for e in &passive {
                add(e.from, e.to, &mut adj);
            }
            for e in demands.iter().chain(sources.iter()) {
                add(e.from, e.to, &mut adj);
            }
            add(slack.from, slack.to, &mut adj);
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(v) = stack.pop() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            for (i, s) in seen.iter().enumerate() {
                if !s {
                    violations.push(format!("node `{}` is not connected to the grid", nodes[i].id));
                }
            }
        }

        if !violations.is_empty() {
            return Err(TopologyError::Invalid(violations));
        }

        let mut edges = Vec::with_capacity(passive.len() + demands.len() + sources.len() + 1);
        for e in &passive {
            edges.push(EdgeRef { kind: EdgeKind::Passive, from: e.from, to: e.to });
        }
        for e in &demands {
            edges.push(EdgeRef { kind: EdgeKind::Demand, from: e.from, to: e.to });
        }
        for e in &sources {
            edges.push(EdgeRef { kind: EdgeKind::Source, from: e.from, to: e.to });
        }
        edges.push(EdgeRef { kind: EdgeKind::Slack, from: slack.from, to: slack.to });

        let layout = StateLayout::build(&nodes, &edges, passive.len(), demands.len(), sources.len());
        Ok(Self { nodes, passive, demands, sources, slack, ambient_c, cp, edges, layout })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|x| x.id == id)
    }
    pub fn passive_edges(&self) -> &[PassiveEdge] {
        &self.passive
    }
    pub fn demand_edges(&self) -> &[ActiveEdge] {
        &self.demands
    }
    pub fn source_edges(&self) -> &[ActiveEdge] {
        &self.sources
    }
    pub fn slack_edge(&self) -> &SlackEdge {
        &self.slack
    }
    pub fn ambient_temperature(&self) -> f64 {
        self.ambient_c
    }
    /// Specific heat capacity [kJ/(kg K)].
    pub fn cp(&self) -> f64 {
        self.cp
    }
    /// Unified edge list: passive, demand, source, slack.
    pub fn edges(&self) -> &[EdgeRef] {
        &self.edges
    }
    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }
    /// Dimension of the heat-exchange vector (#demands + #sources).
    pub fn q_dim(&self) -> usize {
        self.demands.len() + self.sources.len()
    }
    /// Names of the heat-exchange entries, in vector order.
    pub fn q_names(&self) -> Vec<String> {
        self.demands
            .iter()
            .chain(self.sources.iter())
            .map(|e| format!("{}->{}", self.nodes[e.from].id, self.nodes[e.to].id))
            .collect()
    }
    /// Outlet setpoint of the `qi`-th heat-exchange edge.
    pub fn q_setpoint(&self, qi: usize) -> f64 {
        if qi < self.demands.len() {
            self.demands[qi].t_set_c
        } else {
            self.sources[qi - self.demands.len()].t_set_c
        }
    }
    /// Unified-edge index of the `qi`-th heat-exchange edge.
    pub fn q_edge(&self, qi: usize) -> usize {
        self.passive.len() + qi
    }

    /// A fresh state with all FIXED entries set from the setpoints and FREE
    /// entries at a crude physical guess (setpoint temperatures, interpolated
    /// pressures, 0.1 kg/s flows).
    pub fn initial_state(&self) -> GridState {
        let lay = &self.layout;
        let mut v = DVector::zeros(lay.dim());
        let t0 = self.slack.t_set_c;
        let p_mid = 0.5 * (self.slack.p_set_supply_bar + self.slack.p_set_return_bar);
        for (i, node) in self.nodes.iter().enumerate() {
            v[lay.t(i)] = t0;
            v[lay.p(i)] = match node.side {
                Some(Side::Supply) => self.slack.p_set_supply_bar,
                Some(Side::Return) => self.slack.p_set_return_bar,
                None => p_mid,
            };
        }
        for e in 0..self.edges.len() {
            v[lay.mdot(e)] = 0.1;
            v[lay.tend(e)] = t0;
        }
        let mut state = GridState { values: v };
        self.apply_fixed(&mut state);
        state
    }

    /// Overwrite all FIXED entries of `state` with their setpoint values.
    pub fn apply_fixed(&self, state: &mut GridState) {
        let lay = &self.layout;
        for (qi, e) in self.demands.iter().chain(self.sources.iter()).enumerate() {
            state.values[lay.tend(self.q_edge(qi))] = e.t_set_c;
        }
        let slack_edge = self.edges.len() - 1;
        state.values[lay.tend(slack_edge)] = self.slack.t_set_c;
        state.values[lay.p(self.slack.to)] = self.slack.p_set_supply_bar;
        state.values[lay.p(self.slack.from)] = self.slack.p_set_return_bar;
    }

    /// Insert the free subvector into a full state, fixed entries from setpoints.
    pub fn state_from_free(&self, free: &DVector<f64>) -> GridState {
        let lay = &self.layout;
        let mut v = DVector::zeros(lay.dim());
        for (slot, &full) in lay.free_indices().iter().enumerate() {
            v[full] = free[slot];
        }
        let mut state = GridState { values: v };
        self.apply_fixed(&mut state);
        state
    }
}

/// Full state vector of a grid: per-node temperature and pressure, per-edge
/// mass flow and outlet temperature, in the canonical layout of the topology.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub values: DVector<f64>,
}

impl GridState {
    pub fn t(&self, lay: &StateLayout, node: usize) -> f64 {
        self.values[lay.t(node)]
    }
    pub fn p(&self, lay: &StateLayout, node: usize) -> f64 {
        self.values[lay.p(node)]
    }
    pub fn mdot(&self, lay: &StateLayout, edge: usize) -> f64 {
        self.values[lay.mdot(edge)]
    }
    pub fn tend(&self, lay: &StateLayout, edge: usize) -> f64 {
        self.values[lay.tend(edge)]
    }
    /// Extract the free entries in layout order.
    pub fn free(&self, lay: &StateLayout) -> DVector<f64> {
        DVector::from_iterator(
            lay.free_dim(),
            lay.free_indices().iter().map(|&i| self.values[i]),
        )
    }
}

/// Heat exchange vector q [kW]: one entry per demand and source edge, demand
/// entries first, in topology declaration order. Positive values are
/// consumption; source entries carry negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatExchangeVector {
    pub values: DVector<f64>,
}

impl HeatExchangeVector {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values }
    }
    pub fn from_slice(v: &[f64]) -> Self {
        Self { values: DVector::from_row_slice(v) }
    }
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

// ---------------------------------------------------------------------------
// topology file format

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum NodeDoc {
    Plain(String),
    Tagged { id: String, side: Option<Side> },
}

#[derive(Debug, Serialize, Deserialize)]
struct PassiveEdgeDoc {
    from: String,
    to: String,
    length_m: f64,
    k_bar_per_kgps2: f64,
    lambda_w_per_mk: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActiveEdgeDoc {
    from: String,
    to: String,
    t_set_c: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SlackEdgeDoc {
    from: String,
    to: String,
    t_set_c: f64,
    p_set_supply_bar: f64,
    p_set_return_bar: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TopologyDoc {
    cp: f64,
    ambient_temperature: f64,
    nodes: Vec<NodeDoc>,
    passive_edges: Vec<PassiveEdgeDoc>,
    #[serde(default)]
    demand_edges: Vec<ActiveEdgeDoc>,
    #[serde(default)]
    source_edges: Vec<ActiveEdgeDoc>,
    slack_edge: SlackEdgeDoc,
}

/// Parse and validate a topology document (JSON).
pub fn load_topology_str(text: &str) -> Result<GridTopology, TopologyError> {
    let doc: TopologyDoc =
        serde_json::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
    let nodes: Vec<Node> = doc
        .nodes
        .into_iter()
        .map(|n| match n {
            NodeDoc::Plain(id) => Node { id, side: None },
            NodeDoc::Tagged { id, side } => Node { id, side },
        })
        .collect();
    let index: HashMap<&str, usize> =
        nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut violations = Vec::new();
    let mut resolve = |id: &str, what: &str| -> usize {
        match index.get(id) {
            Some(&i) => i,
            None => {
                violations.push(format!("{what} references unknown node `{id}`"));
                usize::MAX
            }
        }
    };
    let passive: Vec<PassiveEdge> = doc
        .passive_edges
        .iter()
        .map(|e| PassiveEdge {
            from: resolve(&e.from, "passive edge"),
            to: resolve(&e.to, "passive edge"),
            length_m: e.length_m,
            k: e.k_bar_per_kgps2,
            lambda: e.lambda_w_per_mk,
        })
        .collect();
    let demands: Vec<ActiveEdge> = doc
        .demand_edges
        .iter()
        .map(|e| ActiveEdge {
            from: resolve(&e.from, "demand edge"),
            to: resolve(&e.to, "demand edge"),
            t_set_c: e.t_set_c,
        })
        .collect();
    let sources: Vec<ActiveEdge> = doc
        .source_edges
        .iter()
        .map(|e| ActiveEdge {
            from: resolve(&e.from, "source edge"),
            to: resolve(&e.to, "source edge"),
            t_set_c: e.t_set_c,
        })
        .collect();
    let slack = SlackEdge {
        from: resolve(&doc.slack_edge.from, "slack edge"),
        to: resolve(&doc.slack_edge.to, "slack edge"),
        t_set_c: doc.slack_edge.t_set_c,
        p_set_supply_bar: doc.slack_edge.p_set_supply_bar,
        p_set_return_bar: doc.slack_edge.p_set_return_bar,
    };
    if !violations.is_empty() {
        return Err(TopologyError::Invalid(violations));
    }
    GridTopology::new(nodes, passive, demands, sources, slack, doc.ambient_temperature, doc.cp)
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<GridTopology, TopologyError> {
    let text = std::fs::read_to_string(path)?;
    load_topology_str(&text)
}

/// Serialize a topology back to its JSON document form.
pub fn save_topology_str(topo: &GridTopology) -> String {
    let id = |i: usize| topo.nodes[i].id.clone();
    let doc = TopologyDoc {
        cp: topo.cp,
        ambient_temperature: topo.ambient_c,
        nodes: topo
            .nodes
            .iter()
            .map(|n| NodeDoc::Tagged { id: n.id.clone(), side: n.side })
            .collect(),
        passive_edges: topo
            .passive
            .iter()
            .map(|e| PassiveEdgeDoc {
                from: id(e.from),
                to: id(e.to),
                length_m: e.length_m,
                k_bar_per_kgps2: e.k,
                lambda_w_per_mk: e.lambda,
            })
            .collect(),
        demand_edges: topo
            .demands
            .iter()
            .map(|e| ActiveEdgeDoc { from: id(e.from), to: id(e.to), t_set_c: e.t_set_c })
            .collect(),
        source_edges: topo
            .sources
            .iter()
            .map(|e| ActiveEdgeDoc { from: id(e.from), to: id(e.to), t_set_c: e.t_set_c })
            .collect(),
        slack_edge: SlackEdgeDoc {
            from: id(topo.slack.from),
            to: id(topo.slack.to),
            t_set_c: topo.slack.t_set_c,
            p_set_supply_bar: topo.slack.p_set_supply_bar,
            p_set_return_bar: topo.slack.p_set_return_bar,
        },
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("topology serializes");
    s.push('\n');
    s
}

pub fn save_topology(topo: &GridTopology, path: impl AsRef<Path>) -> Result<(), TopologyError> {
    std::fs::write(path, save_topology_str(topo))?;
    Ok(())
}
