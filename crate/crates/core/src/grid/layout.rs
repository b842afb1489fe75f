//! Canonical index layout of the state vector.
//!
//! The full state is ordered as `[T per node | p per node | mdot per edge |
//! Tend per edge]` with edges in unified order (passive, demand, source,
//! slack). Entries that are pinned by setpoints — outlet temperatures of
//! active edges and the two slack node pressures — are FIXED; the rest are
//! FREE. The layout is a bijection between (kind, element) pairs and vector
//! indices and never changes for a given topology.

use super::{EdgeRef, Node};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    NodeTemperature,
    NodePressure,
    EdgeMassflow,
    EdgeEndTemperature,
}

#[derive(Debug, Clone)]
pub struct StateLayout {
    n_nodes: usize,
    n_edges: usize,
    names: Vec<String>,
    fixed: Vec<bool>,
    free_indices: Vec<usize>,
    /// full index -> free slot (usize::MAX when fixed)
    free_slot: Vec<usize>,
    /// group of each full index
    kinds: Vec<VarKind>,
}

impl StateLayout {
    pub(super) fn build(
        nodes: &[Node],
        edges: &[EdgeRef],
        n_passive: usize,
        n_demands: usize,
        n_sources: usize,
    ) -> Self {
        let n = nodes.len();
        let ne = edges.len();
        let dim = 2 * n + 2 * ne;
        let mut names = Vec::with_capacity(dim);
        let mut kinds = Vec::with_capacity(dim);
        for node in nodes {
            names.push(format!("T:{}", node.id));
            kinds.push(VarKind::NodeTemperature);
        }
        for node in nodes {
            names.push(format!("p:{}", node.id));
            kinds.push(VarKind::NodePressure);
        }
        for e in edges {
            names.push(format!("mdot:{}->{}", nodes[e.from].id, nodes[e.to].id));
            kinds.push(VarKind::EdgeMassflow);
        }
        for e in edges {
            names.push(format!("Tend:{}->{}", nodes[e.from].id, nodes[e.to].id));
            kinds.push(VarKind::EdgeEndTemperature);
        }

        let mut fixed = vec![false; dim];
        // active edge outlet temperatures
        for e in n_passive..ne {
            fixed[2 * n + ne + e] = true;
        }
        debug_assert_eq!(n_passive + n_demands + n_sources + 1, ne);
        // slack node pressures
        let slack = edges[ne - 1];
        fixed[n + slack.from] = true;
        fixed[n + slack.to] = true;

        let mut free_indices = Vec::with_capacity(dim);
        let mut free_slot = vec![usize::MAX; dim];
        for (i, &f) in fixed.iter().enumerate() {
            if !f {
                free_slot[i] = free_indices.len();
                free_indices.push(i);
            }
        }
        Self { n_nodes: n, n_edges: ne, names, fixed, free_indices, free_slot, kinds }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }
    pub fn free_dim(&self) -> usize {
        self.free_indices.len()
    }
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn n_edges(&self) -> usize {
        self.n_edges
    }
    pub fn t(&self, node: usize) -> usize {
        node
    }
    pub fn p(&self, node: usize) -> usize {
        self.n_nodes + node
    }
    pub fn mdot(&self, edge: usize) -> usize {
        2 * self.n_nodes + edge
    }
    pub fn tend(&self, edge: usize) -> usize {
        2 * self.n_nodes + self.n_edges + edge
    }
    pub fn is_fixed(&self, full_index: usize) -> bool {
        self.fixed[full_index]
    }
    /// Full indices of the free entries, in slot order.
    pub fn free_indices(&self) -> &[usize] {
        &self.free_indices
    }
    /// Free slot of a full index, if the entry is free.
    pub fn free_slot(&self, full_index: usize) -> Option<usize> {
        let s = self.free_slot[full_index];
        (s != usize::MAX).then_some(s)
    }
    pub fn kind(&self, full_index: usize) -> VarKind {
        self.kinds[full_index]
    }
    pub fn name(&self, full_index: usize) -> &str {
        &self.names[full_index]
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    /// Full index of a named entry.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use crate::grid::make_loop_grid;

    #[test]
    fn layout_is_a_bijection() {
        let topo = make_loop_grid();
        let lay = topo.layout();
        assert_eq!(lay.dim(), 2 * 18 + 2 * 23);
        // every index named uniquely
        let mut names: Vec<_> = lay.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), lay.dim());
        // free slots invert free_indices
        for (slot, &full) in lay.free_indices().iter().enumerate() {
            assert_eq!(lay.free_slot(full), Some(slot));
            assert!(!lay.is_fixed(full));
        }
        let n_fixed = (0..lay.dim()).filter(|&i| lay.is_fixed(i)).count();
        // 5 active outlet temperatures + 2 slack pressures
        assert_eq!(n_fixed, 7);
        assert_eq!(lay.free_dim() + n_fixed, lay.dim());
    }

    #[test]
    fn accessors_map_into_groups() {
        let topo = make_loop_grid();
        let lay = topo.layout();
        assert!(lay.name(lay.t(0)).starts_with("T:"));
        assert!(lay.name(lay.p(3)).starts_with("p:"));
        assert!(lay.name(lay.mdot(0)).starts_with("mdot:"));
        assert!(lay.name(lay.tend(22)).starts_with("Tend:"));
    }
}
