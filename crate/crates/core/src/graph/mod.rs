//! Immutable CSR-backed property graphs.
//!
//! Every edge slot is a directed edge `src -> dst`; undirected graphs store
//! each input edge as two slots that point at each other through `twin`.
//! Edge properties and labels are indexed by slot.

mod io;
mod split;

pub use io::{load_graph, read_edge_file, read_label_file, read_node_file, write_cluster_map, write_edges, write_graph, write_id_map};
pub use split::{split_edges, split_nodes, EdgeSplit, NodeSplit};

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("{file}:{line}: edge endpoint `{id}` is not a known node")]
    DanglingEndpoint { file: String, line: usize, id: String },
    #[error("{file}:{line}: expected {expected} values, found {found}")]
    Dimension { file: String, line: usize, expected: usize, found: usize },
    #[error("self-loop on node {0} is not allowed")]
    SelfLoop(String),
    #[error("node {node} out of range (graph has {n_nodes} nodes)")]
    NodeOutOfRange { node: usize, n_nodes: usize },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("split needs at least 3 nodes, graph has {0}")]
    TooFewNodes(usize),
    #[error("invalid split ratios {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Out,
    In,
}

/// A reference to a stored edge slot together with the direction it was
/// traversed in. `incoming == true` means the slot `u -> v` was walked from
/// `v` back to `u`, which only happens on directed graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EdgeRef {
    pub edge: usize,
    pub incoming: bool,
}

/// Compressed row storage: `targets[offsets[v]..offsets[v+1]]` are the
/// neighbors of `v`, and `slots` the matching edge slot ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub slots: Vec<usize>,
}

impl Csr {
    fn build(n: usize, pairs: &[(usize, usize)]) -> Self {
        // counting sort keyed on the row, stable within a row
        let mut offsets = vec![0usize; n + 1];
        for &(row, _) in pairs {
            offsets[row + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut targets = vec![0; pairs.len()];
        let mut slots = vec![0; pairs.len()];
        for (idx, &(row, col)) in pairs.iter().enumerate() {
            let at = cursor[row];
            targets[at] = col;
            slots[at] = idx;
            cursor[row] += 1;
        }
        Csr { offsets, targets, slots }
    }

    #[inline]
    pub fn row(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn row_slots(&self, v: usize) -> &[usize] {
        &self.slots[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

#[derive(Clone, Debug)]
pub struct PropertyGraph {
    n_nodes: usize,
    directed: bool,
    out_adj: Csr,
    in_adj: Option<Csr>,
    sources: Vec<usize>,
    twin: Option<Vec<usize>>,
    node_props: Array2<f64>,
    edge_props: Option<Array2<f64>>,
    node_labels: Option<Array2<u8>>,
    edge_labels: Option<Vec<i64>>,
    node_ids: Vec<String>,
}

/// Raw material for [`PropertyGraph::build`]. Edges are given once each;
/// undirected edges are expanded into both directions during the build.
#[derive(Clone, Debug, Default)]
pub struct GraphParts {
    pub node_props: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
    pub directed: bool,
    pub edge_props: Option<Array2<f64>>,
    pub edge_labels: Option<Vec<i64>>,
    pub node_labels: Option<Array2<u8>>,
    pub node_ids: Option<Vec<String>>,
}

impl PropertyGraph {
    pub fn build(parts: GraphParts) -> Result<Self> {
        let GraphParts { node_props, edges, directed, edge_props, edge_labels, node_labels, node_ids } = parts;
        let n = node_props.nrows();
        let node_ids = match node_ids {
            Some(ids) if ids.len() == n => ids,
            Some(ids) => {
                return Err(GraphError::Invalid(format!("{} node ids for {} nodes", ids.len(), n)));
            }
            None => (0..n).map(|i| i.to_string()).collect(),
        };
        if let Some(row) = node_props.rows().into_iter().position(|r| r.iter().any(|x| !x.is_finite())) {
            return Err(GraphError::Invalid(format!("node {} has a non-finite property", node_ids[row])));
        }
        if let Some(ep) = &edge_props {
            if ep.nrows() != edges.len() {
                return Err(GraphError::Invalid(format!("{} edge property rows for {} edges", ep.nrows(), edges.len())));
            }
            if ep.iter().any(|x| !x.is_finite()) {
                return Err(GraphError::Invalid("non-finite edge property".into()));
            }
        }
        if let Some(el) = &edge_labels {
            if el.len() != edges.len() {
                return Err(GraphError::Invalid(format!("{} edge labels for {} edges", el.len(), edges.len())));
            }
        }
        if let Some(labels) = &node_labels {
            if labels.nrows() != n {
                return Err(GraphError::Invalid(format!("{} label rows for {} nodes", labels.nrows(), n)));
            }
            for (v, row) in labels.rows().into_iter().enumerate() {
                if row.iter().all(|&x| x == 0) {
                    return Err(GraphError::Invalid(format!("node {} has no label", node_ids[v])));
                }
                if row.iter().any(|&x| x > 1) {
                    return Err(GraphError::Invalid(format!("node {} has a non-binary label entry", node_ids[v])));
                }
            }
        }
        for &(u, v) in &edges {
            for w in [u, v] {
                if w >= n {
                    return Err(GraphError::NodeOutOfRange { node: w, n_nodes: n });
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop(node_ids[u].clone()));
            }
        }

        // input edge i becomes slot 2i (and 2i+1 for the reverse direction)
        // before the rows are sorted
        let pairs: Vec<(usize, usize)> = if directed {
            edges.clone()
        } else {
            edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect()
        };
        let out_adj = Csr::build(n, &pairs);
        let mut position = vec![0usize; pairs.len()];
        for (at, &slot) in out_adj.slots.iter().enumerate() {
            position[slot] = at;
        }
        let origin = |pre: usize| if directed { pre } else { pre / 2 };

        let mut sources = vec![0usize; pairs.len()];
        for v in 0..n {
            for at in out_adj.offsets[v]..out_adj.offsets[v + 1] {
                sources[at] = v;
            }
        }
        let twin = (!directed).then(|| {
            let mut twin = vec![0usize; pairs.len()];
            for pre in 0..pairs.len() {
                twin[position[pre]] = position[pre ^ 1];
            }
            twin
        });
        let edge_props = edge_props.map(|ep| {
            let mut out = Array2::zeros((pairs.len(), ep.ncols()));
            for (at, &pre) in out_adj.slots.iter().enumerate() {
                out.row_mut(at).assign(&ep.row(origin(pre)));
            }
            out
        });
        let edge_labels = edge_labels.map(|el| out_adj.slots.iter().map(|&pre| el[origin(pre)]).collect());

        // slots now refer to final positions
        let out_adj = Csr { slots: (0..pairs.len()).collect(), ..out_adj };
        let in_adj = directed.then(|| {
            let reversed: Vec<(usize, usize)> = out_adj.targets.iter().zip(&sources).map(|(&t, &s)| (t, s)).collect();
            Csr::build(n, &reversed)
        });

        Ok(PropertyGraph {
            n_nodes: n,
            directed,
            out_adj,
            in_adj,
            sources,
            twin,
            node_props,
            edge_props,
            node_labels,
            edge_labels,
            node_ids,
        })
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of stored (directed) edge slots.
    #[inline]
    pub fn n_edges(&self) -> usize {
        self.out_adj.targets.len()
    }

    /// Edge count as reported for the input: slots for directed graphs,
    /// slot pairs for undirected ones.
    pub fn n_input_edges(&self) -> usize {
        if self.directed {
            self.n_edges()
        } else {
            self.n_edges() / 2
        }
    }

    #[inline]
    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn out_adj(&self) -> &Csr {
        &self.out_adj
    }

    pub fn in_adj(&self) -> Option<&Csr> {
        self.in_adj.as_ref()
    }

    pub fn neighbors(&self, v: usize, direction: Direction) -> Result<&[usize]> {
        self.check_node(v)?;
        Ok(match (direction, &self.in_adj) {
            (Direction::In, Some(in_adj)) => in_adj.row(v),
            _ => self.out_adj.row(v),
        })
    }

    /// Slot ids matching [`PropertyGraph::neighbors`] element by element.
    pub fn neighbor_slots(&self, v: usize, direction: Direction) -> Result<&[usize]> {
        self.check_node(v)?;
        Ok(match (direction, &self.in_adj) {
            (Direction::In, Some(in_adj)) => in_adj.row_slots(v),
            _ => self.out_adj.row_slots(v),
        })
    }

    /// The neighborhood used for sampling: out-edges, followed on directed
    /// graphs by in-edges walked backwards.
    pub fn incident(&self, v: usize) -> impl Iterator<Item = (usize, EdgeRef)> + '_ {
        let outs = self
            .out_adj
            .row(v)
            .iter()
            .zip(self.out_adj.row_slots(v))
            .map(|(&t, &e)| (t, EdgeRef { edge: e, incoming: false }));
        let ins = self.in_adj.iter().flat_map(move |csr| {
            csr.row(v).iter().zip(csr.row_slots(v)).map(|(&s, &e)| (s, EdgeRef { edge: e, incoming: true }))
        });
        outs.chain(ins)
    }

    pub fn incident_degree(&self, v: usize) -> usize {
        self.out_adj.degree(v) + self.in_adj.as_ref().map_or(0, |c| c.degree(v))
    }

    pub fn degree(&self, v: usize) -> usize {
        self.out_adj.degree(v)
    }

    #[inline]
    pub fn source(&self, edge: usize) -> usize {
        self.sources[edge]
    }

    #[inline]
    pub fn target(&self, edge: usize) -> usize {
        self.out_adj.targets[edge]
    }

    /// Reverse slot of an undirected edge.
    pub fn twin(&self, edge: usize) -> Option<usize> {
        self.twin.as_ref().map(|t| t[edge])
    }

    pub fn node_props(&self) -> &Array2<f64> {
        &self.node_props
    }

    pub fn prop(&self, v: usize) -> ArrayView1<'_, f64> {
        self.node_props.row(v)
    }

    pub fn prop_dim(&self) -> usize {
        self.node_props.ncols()
    }

    pub fn edge_props(&self) -> Option<&Array2<f64>> {
        self.edge_props.as_ref()
    }

    pub fn node_labels(&self) -> Option<&Array2<u8>> {
        self.node_labels.as_ref()
    }

    pub fn label_dim(&self) -> usize {
        self.node_labels.as_ref().map_or(0, |l| l.ncols())
    }

    /// True when some node carries more than one label.
    pub fn is_multi_label(&self) -> bool {
        self.node_labels
            .as_ref()
            .is_some_and(|l| l.rows().into_iter().any(|r| r.iter().filter(|&&x| x != 0).count() > 1))
    }

    pub fn edge_labels(&self) -> Option<&[i64]> {
        self.edge_labels.as_deref()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.out_adj.row(u).contains(&v)
    }

    /// Edge slots in canonical input order: every slot of a directed graph,
    /// and one slot per undirected pair (the one with the smaller id).
    pub fn canonical_edges(&self) -> Vec<usize> {
        (0..self.n_edges()).filter(|&e| self.twin(e).is_none_or(|t| e < t)).collect()
    }

    /// Keeps every node but only the listed canonical edge slots (and their
    /// twins on undirected graphs).
    pub fn edge_subgraph(&self, keep: &[usize]) -> Result<PropertyGraph> {
        let edges: Vec<(usize, usize)> = keep.iter().map(|&e| (self.source(e), self.target(e))).collect();
        let edge_props = self.edge_props.as_ref().map(|ep| ep.select(ndarray::Axis(0), keep));
        let edge_labels = self.edge_labels.as_ref().map(|el| keep.iter().map(|&e| el[e]).collect());
        PropertyGraph::build(GraphParts {
            node_props: self.node_props.clone(),
            edges,
            directed: self.directed,
            edge_props,
            edge_labels,
            node_labels: self.node_labels.clone(),
            node_ids: Some(self.node_ids.clone()),
        })
    }

    fn check_node(&self, v: usize) -> Result<()> {
        if v >= self.n_nodes {
            Err(GraphError::NodeOutOfRange { node: v, n_nodes: self.n_nodes })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn props(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64)
    }

    fn graph(n: usize, edges: &[(usize, usize)], directed: bool) -> PropertyGraph {
        PropertyGraph::build(GraphParts { node_props: props(n), edges: edges.to_vec(), directed, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn empty_edge_set() {
        let g = graph(3, &[], false);
        assert_eq!(g.n_edges(), 0);
        assert_eq!(g.out_adj().offsets, vec![0, 0, 0, 0]);
    }

    #[test]
    fn triangle_rows_have_two_targets() {
        let g = graph(3, &[(0, 1), (1, 2), (2, 0)], false);
        assert_eq!(g.n_edges(), 6);
        for v in 0..3 {
            let mut nb = g.neighbors(v, Direction::Out).unwrap().to_vec();
            nb.sort();
            let expect: Vec<usize> = (0..3).filter(|&u| u != v).collect();
            assert_eq!(nb, expect);
            assert_eq!(g.neighbors(v, Direction::In).unwrap(), g.neighbors(v, Direction::Out).unwrap());
        }
    }

    #[test]
    fn directed_chain() {
        let g = graph(3, &[(0, 1), (1, 2)], true);
        assert_eq!(g.neighbors(1, Direction::Out).unwrap(), &[2]);
        assert_eq!(g.neighbors(1, Direction::In).unwrap(), &[0]);
        assert!(g.neighbors(0, Direction::In).unwrap().is_empty());
        let inc: Vec<_> = g.incident(1).collect();
        assert_eq!(inc.len(), 2);
        assert_eq!(inc[0].0, 2);
        assert!(!inc[0].1.incoming);
        assert_eq!(inc[1].0, 0);
        assert!(inc[1].1.incoming);
        assert_eq!(g.source(inc[1].1.edge), 0);
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let g = graph(4, &[(0, 1)], false);
        assert!(g.neighbors(3, Direction::Out).unwrap().is_empty());
        assert!(matches!(g.neighbors(4, Direction::Out), Err(GraphError::NodeOutOfRange { .. })));
    }

    #[test]
    fn self_loop_rejected() {
        let err = PropertyGraph::build(GraphParts { node_props: props(2), edges: vec![(1, 1)], ..Default::default() });
        assert!(matches!(err, Err(GraphError::SelfLoop(_))));
    }

    #[test]
    fn twins_and_edge_payloads_follow_slots() {
        let parts = GraphParts {
            node_props: props(3),
            edges: vec![(0, 1), (2, 1)],
            directed: false,
            edge_props: Some(array![[1.0], [2.0]]),
            edge_labels: Some(vec![1, -1]),
            ..Default::default()
        };
        let g = PropertyGraph::build(parts).unwrap();
        for e in 0..g.n_edges() {
            let t = g.twin(e).unwrap();
            assert_eq!(g.source(t), g.target(e));
            assert_eq!(g.target(t), g.source(e));
            assert_eq!(g.edge_props().unwrap()[[e, 0]], g.edge_props().unwrap()[[t, 0]]);
            assert_eq!(g.edge_labels().unwrap()[e], g.edge_labels().unwrap()[t]);
            let (u, v) = (g.source(e).min(g.target(e)), g.source(e).max(g.target(e)));
            let expect = if (u, v) == (0, 1) { 1 } else { -1 };
            assert_eq!(g.edge_labels().unwrap()[e], expect);
        }
        assert_eq!(g.canonical_edges().len(), 2);
    }

    #[test]
    fn parallel_edges_kept() {
        let g = graph(2, &[(0, 1), (0, 1)], true);
        assert_eq!(g.neighbors(0, Direction::Out).unwrap(), &[1, 1]);
    }

    #[test]
    fn unlabeled_row_rejected() {
        let err = PropertyGraph::build(GraphParts {
            node_props: props(2),
            node_labels: Some(array![[1u8, 0], [0, 0]]),
            ..Default::default()
        });
        assert!(matches!(err, Err(GraphError::Invalid(_))));
    }

    #[test]
    fn edge_subgraph_keeps_twins() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)], false);
        let canon = g.canonical_edges();
        let sub = g.edge_subgraph(&canon[..2]).unwrap();
        assert_eq!(sub.n_edges(), 4);
        assert_eq!(sub.n_nodes(), 4);
    }
}
