//! Communication topology: undirected connected graphs with a canonical
//! directed-edge indexing.
//!
//! Every undirected edge {i, j} induces two directed edges (i, j) and (j, i).
//! Directed edges are indexed lexicographically by (source, target), which
//! groups them by source agent with targets ascending. Consensus state and
//! the aggregate matrices are laid out in this order, so spectra and traces
//! are reproducible across runs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from graph construction and queries.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("node index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
}

/// An undirected connected graph over nodes `0..n`.
///
/// Immutable after construction; safe to share across threads read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphJson", into = "GraphJson")]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    directed_edges: Vec<(usize, usize)>,
    directed_index: BTreeMap<(usize, usize), usize>,
}

/// Wire form: `{"n": N, "edges": [[i, j], ...]}`.
#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl From<Graph> for GraphJson {
    fn from(g: Graph) -> Self {
        GraphJson {
            n: g.n,
            edges: g.edges,
        }
    }
}

impl TryFrom<GraphJson> for Graph {
    type Error = GraphError;

    fn try_from(json: GraphJson) -> Result<Self, GraphError> {
        Graph::new(json.n, &json.edges)
    }
}

impl Graph {
    /// Builds a graph from `n` nodes and a list of unordered edges.
    ///
    /// Rejects self-loops, duplicate edges (in either orientation),
    /// out-of-range node indices, and disconnected topologies.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::IndexOutOfRange { index: 0, n: 0 });
        }
        let mut canonical: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in edges {
            for idx in [a, b] {
                if idx >= n {
                    return Err(GraphError::IndexOutOfRange { index: idx, n });
                }
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(GraphError::DuplicateEdge(key.0, key.1));
            }
            canonical.push(key);
        }
        canonical.sort_unstable();

        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &canonical {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        // BFS from node 0.
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        visited[0] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &neighbors[u] {
                if !visited[v] {
                    visited[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        if reached != n {
            return Err(GraphError::Disconnected);
        }

        // Lexicographic ordering of ordered pairs groups directed edges by
        // source, targets ascending.
        let mut directed_edges = Vec::with_capacity(2 * canonical.len());
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                directed_edges.push((i, j));
            }
        }
        let directed_index = directed_edges
            .iter()
            .enumerate()
            .map(|(k, &e)| (e, k))
            .collect();

        Ok(Graph {
            n,
            edges: canonical,
            neighbors,
            directed_edges,
            directed_index,
        })
    }

    /// Number of nodes.
    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Undirected edges in canonical (min, max) sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Number of directed edges, `d = 2|E| = Σ_i deg_i`.
    pub fn directed_edge_count(&self) -> usize {
        self.directed_edges.len()
    }

    /// Neighbors of node `i`, sorted ascending.
    pub fn neighbors(&self, i: usize) -> Result<&[usize], GraphError> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or(GraphError::IndexOutOfRange {
                index: i,
                n: self.n,
            })
    }

    /// Degree of node `i`.
    pub fn degree(&self, i: usize) -> Result<usize, GraphError> {
        self.neighbors(i).map(<[usize]>::len)
    }

    /// Canonical index of the directed edge (i, j) in `0..d`.
    pub fn directed_edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.directed_index.get(&(i, j)).copied()
    }

    /// Directed edges in canonical lexicographic order.
    pub fn directed_edges(&self) -> &[(usize, usize)] {
        &self.directed_edges
    }

    /// Samples an Erdős–Rényi graph augmented with a random spanning tree so
    /// the result is always connected. The same seed yields the same graph.
    pub fn random_connected(n: usize, edge_prob: f64, seed: u64) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::IndexOutOfRange { index: 0, n: 0 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = std::collections::BTreeSet::new();

        // Random spanning tree: attach each node (in a shuffled order) to a
        // uniformly chosen, already-attached node.
        let mut order: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            let swap = rng.random_range(0..=k);
            order.swap(k, swap);
        }
        for k in 1..n {
            let parent = order[rng.random_range(0..k)];
            let (a, b) = (order[k].min(parent), order[k].max(parent));
            edges.insert((a, b));
        }

        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < edge_prob {
                    edges.insert((i, j));
                }
            }
        }
        let edges: Vec<(usize, usize)> = edges.into_iter().collect();
        Self::new(n, &edges)
    }

    /// Path graph 0–1–…–(n−1).
    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges)
    }

    /// Cycle graph on `n ≥ 3` nodes.
    pub fn cycle(n: usize) -> Result<Self, GraphError> {
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        if n >= 3 {
            edges.push((0, n - 1));
        }
        Self::new(n, &edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_connected_graph() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        assert_eq!(g.degree(0).unwrap(), 1);
        assert_eq!(g.degree(1).unwrap(), 1);
        assert_eq!(g.directed_edge_count(), 2);
    }

    #[test]
    fn three_cycle_degrees() {
        let g = Graph::new(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(g.degree(0).unwrap(), 2);
        assert_eq!(g.degree(1).unwrap(), 2);
        assert_eq!(g.degree(2).unwrap(), 2);
        assert_eq!(g.directed_edge_count(), 6);
        assert_eq!(g.neighbors(1).unwrap(), &[0, 2]);
    }

    #[test]
    fn isolated_node_is_rejected() {
        assert_eq!(Graph::new(3, &[(0, 1)]), Err(GraphError::Disconnected));
    }

    #[test]
    fn self_loop_and_duplicate_rejected() {
        assert_eq!(Graph::new(2, &[(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            Graph::new(2, &[(0, 1), (1, 0)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert_eq!(
            Graph::new(2, &[(0, 2)]),
            Err(GraphError::IndexOutOfRange { index: 2, n: 2 })
        );
    }

    #[test]
    fn path_neighbors() {
        let g = Graph::path(3).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
        assert_eq!(g.neighbors(1).unwrap(), &[0, 2]);
    }

    #[test]
    fn directed_index_is_lexicographic() {
        let g = Graph::new(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let expected = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
        assert_eq!(g.directed_edges(), &expected);
        for (k, &(i, j)) in expected.iter().enumerate() {
            assert_eq!(g.directed_edge_index(i, j), Some(k));
        }
        assert_ne!(g.directed_edge_index(0, 1), g.directed_edge_index(1, 0));
    }

    #[test]
    fn single_node_has_no_edges() {
        let g = Graph::random_connected(1, 0.9, 3).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.directed_edge_count(), 0);
    }

    #[test]
    fn zero_probability_leaves_spanning_tree() {
        let g = Graph::random_connected(5, 0.0, 42).unwrap();
        assert_eq!(g.edges().len(), 4);
    }

    #[test]
    fn same_seed_same_graph() {
        let a = Graph::random_connected(10, 0.4, 7).unwrap();
        let b = Graph::random_connected(10, 0.4, 7).unwrap();
        assert_eq!(a.edges(), b.edges());
    }

    #[test]
    fn json_round_trip() {
        let g = Graph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"n":3,"edges":[[0,1],[1,2]]}"#);
        let back: Graph = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn json_rejects_disconnected() {
        let res: Result<Graph, _> = serde_json::from_str(r#"{"n":3,"edges":[[0,1]]}"#);
        assert!(res.is_err());
    }

    proptest! {
        #[test]
        fn random_graphs_are_connected_and_consistent(
            n in 1usize..12,
            prob in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let g = Graph::random_connected(n, prob, seed).unwrap();
            prop_assert_eq!(g.directed_edge_count(), 2 * g.edges().len());
            let degree_sum: usize = (0..n).map(|i| g.degree(i).unwrap()).sum();
            prop_assert_eq!(degree_sum, g.directed_edge_count());
            for i in 0..n {
                for &j in g.neighbors(i).unwrap() {
                    prop_assert!(g.neighbors(j).unwrap().contains(&i));
                    prop_assert!(g.directed_edge_index(i, j).is_some());
                    prop_assert!(g.directed_edge_index(j, i).is_some());
                }
            }
        }
    }
}
