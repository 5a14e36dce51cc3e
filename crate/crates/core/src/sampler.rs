//! Biased two-hop neighborhood sampling.
//!
//! Every neighbor `u` of `v` gets the bias `b_s` when both sit in the same
//! node cluster and `b_d` otherwise. Normalized biases are the selection
//! probabilities; each node draws `sample_size` neighbors with replacement,
//! and every hop-1 occurrence draws its own hop-2 neighbors with the same
//! rule applied from its own point of view.
//!
//! Draws use counter-based keys `(seed, node, hop, slot)`, so a sampled
//! graph does not depend on thread count or scheduling.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterAssignment;
use crate::graph::{EdgeRef, PropertyGraph};
use crate::rng;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid bias config: {0}")]
    Config(String),
    #[error("cannot normalize an empty bias vector")]
    Empty,
    #[error("bias {0} is not positive")]
    NonPositive(f64),
    #[error("cluster assignment covers {got} nodes, graph has {expected}")]
    ClusterMismatch { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SampleError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    /// Bias for neighbors in the same cluster.
    pub b_s: f64,
    /// Bias for neighbors in a different cluster.
    pub b_d: f64,
    pub sample_size: usize,
    pub hops: usize,
    pub seed: u64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig { b_s: 1.0, b_d: 1000.0, sample_size: 25, hops: 2, seed: 0 }
    }
}

impl BiasConfig {
    pub fn unbiased(self) -> Self {
        BiasConfig { b_d: self.b_s, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_s > 0.0 && self.b_s.is_finite()) {
            return Err(SampleError::Config(format!("b_s must be positive, got {}", self.b_s)));
        }
        if !(self.b_d > 0.0 && self.b_d.is_finite()) {
            return Err(SampleError::Config(format!("b_d must be positive, got {}", self.b_d)));
        }
        if self.sample_size == 0 {
            return Err(SampleError::Config("sample_size must be at least 1".into()));
        }
        if self.hops != 2 {
            return Err(SampleError::Config(format!("only 2 hops are supported, got {}", self.hops)));
        }
        Ok(())
    }
}

/// `b_d + (b_s - b_d) * [same cluster]`.
#[inline]
pub fn bias_for(same_cluster: bool, b_s: f64, b_d: f64) -> f64 {
    b_d + (b_s - b_d) * f64::from(u8::from(same_cluster))
}

/// Raw biases of `v`'s neighbors in [`PropertyGraph::incident`] order.
pub fn assign_biases(g: &PropertyGraph, c: &ClusterAssignment, cfg: &BiasConfig, v: usize) -> Vec<f64> {
    g.incident(v).map(|(u, _)| bias_for(c.same(u, v), cfg.b_s, cfg.b_d)).collect()
}

/// Biases of `v` over an explicit neighbor list (used for out-only views).
pub fn assign_biases_over(neighbors: &[usize], c: &ClusterAssignment, cfg: &BiasConfig, v: usize) -> Vec<f64> {
    neighbors.iter().map(|&u| bias_for(c.same(u, v), cfg.b_s, cfg.b_d)).collect()
}

/// `p_i = raw_i / sum(raw)`.
pub fn normalize_biases(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(SampleError::Empty);
    }
    if let Some(&bad) = raw.iter().find(|&&b| !(b > 0.0 && b.is_finite())) {
        return Err(SampleError::NonPositive(bad));
    }
    if raw.iter().all(|&b| b == raw[0]) {
        // exact uniform rows, so equal biases reproduce the unbiased strategy bit for bit
        return Ok(vec![1.0 / raw.len() as f64; raw.len()]);
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|b| b / total).collect())
}

const NO_EDGE: u32 = u32::MAX;
const INCOMING: u32 = 1 << 31;

#[inline]
fn encode_edge(e: Option<EdgeRef>) -> u32 {
    match e {
        None => NO_EDGE,
        Some(EdgeRef { edge, incoming }) => edge as u32 | if incoming { INCOMING } else { 0 },
    }
}

#[inline]
fn decode_edge(x: u32) -> Option<EdgeRef> {
    (x != NO_EDGE).then_some(EdgeRef { edge: (x & !INCOMING) as usize, incoming: x & INCOMING != 0 })
}

/// Per-node cumulative bias tables for inverse-CDF draws.
pub struct NeighborTable {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    edges: Vec<u32>,
    cumulative: Vec<f64>,
    seed: u64,
}

impl NeighborTable {
    pub fn new(g: &PropertyGraph, c: &ClusterAssignment, cfg: &BiasConfig) -> Result<Self> {
        cfg.validate()?;
        if c.assignment.len() != g.n_nodes() {
            return Err(SampleError::ClusterMismatch { expected: g.n_nodes(), got: c.assignment.len() });
        }
        if g.n_nodes() >= NO_EDGE as usize || g.n_edges() >= INCOMING as usize {
            return Err(SampleError::Config("graph too large for 32-bit sample storage".into()));
        }
        let n = g.n_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        let mut edges = Vec::new();
        let mut cumulative = Vec::new();
        for v in 0..n {
            let mut acc = 0.0;
            for (u, e) in g.incident(v) {
                acc += bias_for(c.same(u, v), cfg.b_s, cfg.b_d);
                neighbors.push(u as u32);
                edges.push(encode_edge(Some(e)));
                cumulative.push(acc);
            }
            offsets.push(neighbors.len());
        }
        Ok(NeighborTable { offsets, neighbors, edges, cumulative, seed: cfg.seed })
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Index into `v`'s neighbor list for a uniform `u` in `[0, 1)`.
    #[inline]
    pub fn pick(&self, v: usize, u: f64) -> usize {
        let cum = &self.cumulative[self.offsets[v]..self.offsets[v + 1]];
        let total = *cum.last().expect("non-isolated node");
        let target = u * total;
        cum.partition_point(|&c| c <= target).min(cum.len() - 1)
    }

    /// One draw from `v`'s biased distribution for a counter key. Isolated
    /// nodes return themselves with no edge.
    #[inline]
    pub fn draw(&self, v: usize, hop: u64, slot: u64) -> (u32, u32) {
        if self.degree(v) == 0 {
            return (v as u32, NO_EDGE);
        }
        let u = rng::unit_f64(rng::mix(self.seed, &[v as u64, hop, slot]));
        let at = self.offsets[v] + self.pick(v, u);
        (self.neighbors[at], self.edges[at])
    }

    /// Decoded variant of [`NeighborTable::draw`].
    pub fn draw_neighbor(&self, v: usize, hop: u64, slot: u64) -> (usize, Option<EdgeRef>) {
        let (u, e) = self.draw(v, hop, slot);
        (u as usize, decode_edge(e))
    }
}

/// Fixed-size two-hop samples for every node. Hop-2 row `(v, j)` holds the
/// neighbors drawn for the `j`-th hop-1 occurrence of `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGraph {
    n_nodes: usize,
    sample_size: usize,
    hop1: Vec<u32>,
    hop1_edges: Vec<u32>,
    hop2: Vec<u32>,
    hop2_edges: Vec<u32>,
    pub seed: u64,
}

impl SampledGraph {
    #[inline]
    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn hop1(&self, v: usize) -> &[u32] {
        let s = self.sample_size;
        &self.hop1[v * s..(v + 1) * s]
    }

    #[inline]
    pub fn hop1_edge(&self, v: usize, j: usize) -> Option<EdgeRef> {
        decode_edge(self.hop1_edges[v * self.sample_size + j])
    }

    #[inline]
    pub fn hop2(&self, v: usize, j: usize) -> &[u32] {
        let s = self.sample_size;
        let at = (v * s + j) * s;
        &self.hop2[at..at + s]
    }

    #[inline]
    pub fn hop2_edge(&self, v: usize, j: usize, t: usize) -> Option<EdgeRef> {
        let s = self.sample_size;
        decode_edge(self.hop2_edges[(v * s + j) * s + t])
    }

    /// Builds a sample from explicit rows (tests and oracles).
    /// `hop1[v]` has `s` entries and `hop2[v][j]` has `s` entries each.
    pub fn from_rows(
        hop1: &[Vec<(usize, Option<EdgeRef>)>],
        hop2: &[Vec<Vec<(usize, Option<EdgeRef>)>>],
    ) -> Self {
        let n = hop1.len();
        let s = hop1.first().map_or(0, |r| r.len());
        let mut out = SampledGraph {
            n_nodes: n,
            sample_size: s,
            hop1: Vec::with_capacity(n * s),
            hop1_edges: Vec::with_capacity(n * s),
            hop2: Vec::with_capacity(n * s * s),
            hop2_edges: Vec::with_capacity(n * s * s),
            seed: 0,
        };
        for v in 0..n {
            assert_eq!(hop1[v].len(), s, "ragged hop-1 rows");
            assert_eq!(hop2[v].len(), s, "ragged hop-2 rows");
            for &(u, e) in &hop1[v] {
                out.hop1.push(u as u32);
                out.hop1_edges.push(encode_edge(e));
            }
            for row in &hop2[v] {
                assert_eq!(row.len(), s, "ragged hop-2 rows");
                for &(u, e) in row {
                    out.hop2.push(u as u32);
                    out.hop2_edges.push(encode_edge(e));
                }
            }
        }
        out
    }

    /// `<v>\t<hop>\t<slot>\t<sampled_id>` lines with original node ids; hop-2
    /// slots are numbered `j * sample_size + t`.
    pub fn write_tsv(&self, g: &PropertyGraph, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let ids = g.node_ids();
        let s = self.sample_size;
        for v in 0..self.n_nodes {
            for (j, &u) in self.hop1(v).iter().enumerate() {
                writeln!(w, "{}\t1\t{}\t{}", ids[v], j, ids[u as usize])?;
            }
            for j in 0..s {
                for (t, &u) in self.hop2(v, j).iter().enumerate() {
                    writeln!(w, "{}\t2\t{}\t{}", ids[v], j * s + t, ids[u as usize])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws the two-hop sample for every node.
pub fn sample_neighborhood(g: &PropertyGraph, c: &ClusterAssignment, cfg: &BiasConfig) -> Result<SampledGraph> {
    let table = NeighborTable::new(g, c, cfg)?;
    Ok(sample_with_table(&table, g.n_nodes(), cfg))
}

/// Sample for a given training epoch; each epoch gets its own derived seed.
pub fn sample_for_epoch(g: &PropertyGraph, c: &ClusterAssignment, cfg: &BiasConfig, epoch: usize) -> Result<SampledGraph> {
    let cfg = BiasConfig { seed: rng::mix(cfg.seed, &[0xE90C, epoch as u64]), ..*cfg };
    sample_neighborhood(g, c, &cfg)
}

fn sample_with_table(table: &NeighborTable, n: usize, cfg: &BiasConfig) -> SampledGraph {
    let s = cfg.sample_size;
    let mut hop1 = vec![0u32; n * s];
    let mut hop1_edges = vec![0u32; n * s];
    hop1.par_chunks_mut(s).zip(hop1_edges.par_chunks_mut(s)).enumerate().for_each(|(v, (nodes, edges))| {
        for j in 0..s {
            let (u, e) = table.draw(v, 1, j as u64);
            nodes[j] = u;
            edges[j] = e;
        }
    });
    let mut hop2 = vec![0u32; n * s * s];
    let mut hop2_edges = vec![0u32; n * s * s];
    hop2.par_chunks_mut(s * s).zip(hop2_edges.par_chunks_mut(s * s)).enumerate().for_each(|(v, (nodes, edges))| {
        for j in 0..s {
            let src = hop1[v * s + j] as usize;
            for t in 0..s {
                // keyed on the root node so repeated hop-1 nodes are resampled
                let (u, e) = table.draw_from(src, v, (j * s + t) as u64);
                nodes[j * s + t] = u;
                edges[j * s + t] = e;
            }
        }
    });
    SampledGraph { n_nodes: n, sample_size: s, hop1, hop1_edges, hop2, hop2_edges, seed: cfg.seed }
}

impl NeighborTable {
    /// Hop-2 draw from `src`'s distribution, keyed by the root node.
    #[inline]
    fn draw_from(&self, src: usize, root: usize, slot: u64) -> (u32, u32) {
        if self.degree(src) == 0 {
            return (src as u32, NO_EDGE);
        }
        let u = rng::unit_f64(rng::mix(self.seed, &[root as u64, 2, slot]));
        let at = self.offsets[src] + self.pick(src, u);
        (self.neighbors[at], self.edges[at])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphParts;
    use ndarray::Array2;

    /// Star: center 0 linked to 1..=m. `clusters[v]` per node.
    fn star(m: usize, clusters: &[usize]) -> (PropertyGraph, ClusterAssignment) {
        let edges = (1..=m).map(|u| (0, u)).collect();
        let g = PropertyGraph::build(GraphParts { node_props: Array2::zeros((m + 1, 1)), edges, ..Default::default() })
            .unwrap();
        (g, ClusterAssignment::from_labels(clusters))
    }

    #[test]
    fn alg1_bias_formula() {
        assert_eq!(bias_for(true, 1.0, 1000.0), 1.0);
        assert_eq!(bias_for(false, 1.0, 1000.0), 1000.0);
        assert_eq!(bias_for(true, 2.5, 7.0), 2.5);
        let (g, c) = star(3, &[0, 0, 0, 0]);
        let cfg = BiasConfig::default();
        assert_eq!(assign_biases(&g, &c, &cfg, 0), vec![1.0; 3]);
    }

    #[test]
    fn normalize_examples() {
        let p = normalize_biases(&[1.0, 1.0, 1.0, 1000.0, 1000.0]).unwrap();
        let expect = [1.0 / 2003.0, 1.0 / 2003.0, 1.0 / 2003.0, 1000.0 / 2003.0, 1000.0 / 2003.0];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(normalize_biases(&[4.0]).unwrap(), vec![1.0]);
        let u = normalize_biases(&[3.0; 4]).unwrap();
        assert!(u.iter().all(|&x| x == 0.25));
        assert!(matches!(normalize_biases(&[]), Err(SampleError::Empty)));
        assert!(matches!(normalize_biases(&[1.0, 0.0]), Err(SampleError::NonPositive(_))));
    }

    #[test]
    fn ratio_preserved() {
        let p = normalize_biases(&[1.0, 1.0, 7.0]).unwrap();
        assert!((p[2] / p[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_neighbor_fills_every_slot() {
        let (g, c) = star(1, &[0, 1]);
        let s = sample_neighborhood(&g, &c, &BiasConfig { sample_size: 7, ..Default::default() }).unwrap();
        assert!(s.hop1(1).iter().all(|&u| u == 0));
        for j in 0..7 {
            assert_eq!(s.hop1_edge(1, j).map(|e| g.target(e.edge)), Some(0));
        }
    }

    #[test]
    fn isolated_node_falls_back_to_itself() {
        let g = PropertyGraph::build(GraphParts { node_props: Array2::zeros((3, 1)), edges: vec![(0, 1)], ..Default::default() })
            .unwrap();
        let c = ClusterAssignment::from_labels(&[0, 0, 0]);
        let s = sample_neighborhood(&g, &c, &BiasConfig { sample_size: 4, ..Default::default() }).unwrap();
        assert!(s.hop1(2).iter().all(|&u| u == 2));
        assert!((0..4).all(|j| s.hop1_edge(2, j).is_none()));
        assert!(s.hop2(2, 0).iter().all(|&u| u == 2));
    }

    #[test]
    fn empirical_matches_exact_probabilities() {
        // b_s = 1, b_d = 3, two similar and two dissimilar neighbors
        let (g, c) = star(4, &[0, 0, 0, 1, 1]);
        let cfg = BiasConfig { b_s: 1.0, b_d: 3.0, seed: 42, ..Default::default() };
        let table = NeighborTable::new(&g, &c, &cfg).unwrap();
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for slot in 0..draws {
            counts[table.draw_neighbor(0, 1, slot).0] += 1;
        }
        for (u, expect) in [(1, 1.0 / 8.0), (2, 1.0 / 8.0), (3, 3.0 / 8.0), (4, 3.0 / 8.0)] {
            let freq = counts[u] as f64 / draws as f64;
            assert!((freq - expect).abs() < 0.01, "node {u}: {freq}");
        }
    }

    #[test]
    fn uniform_when_biases_equal() {
        let (g, c) = star(5, &[0, 0, 1, 1, 2, 2]);
        let cfg = BiasConfig { b_s: 2.0, b_d: 2.0, seed: 9, ..Default::default() };
        let table = NeighborTable::new(&g, &c, &cfg).unwrap();
        let draws = 100_000;
        let mut counts = [0usize; 6];
        for slot in 0..draws {
            counts[table.draw_neighbor(0, 1, slot).0] += 1;
        }
        for &k in &counts[1..] {
            assert!((k as f64 / draws as f64 - 0.2).abs() < 0.01);
        }
    }

    #[test]
    fn raising_b_d_never_lowers_dissimilar_probability() {
        let (g, c) = star(5, &[0, 0, 0, 1, 2, 0]);
        let mut last = 0.0;
        for b_d in [0.01, 0.1, 1.0, 2.0, 10.0, 1000.0] {
            let cfg = BiasConfig { b_d, ..Default::default() };
            let p = normalize_biases(&assign_biases(&g, &c, &cfg, 0)).unwrap();
            // neighbors in incident order are 1..=5; 3 and 4 are dissimilar
            let dis = p[2];
            assert!(dis > last);
            last = dis;
        }
    }

    #[test]
    fn samples_are_real_edges_and_deterministic() {
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (4, 1)];
        let g = PropertyGraph::build(GraphParts { node_props: Array2::zeros((5, 1)), edges, directed: true, ..Default::default() })
            .unwrap();
        let c = ClusterAssignment::from_labels(&[0, 1, 0, 1, 0]);
        let cfg = BiasConfig { sample_size: 6, seed: 3, ..Default::default() };
        let s = sample_neighborhood(&g, &c, &cfg).unwrap();
        let check = |v: usize, u: u32, e: Option<EdgeRef>| {
            let e = e.expect("no isolated nodes");
            let (from, to) = if e.incoming { (g.target(e.edge), g.source(e.edge)) } else { (g.source(e.edge), g.target(e.edge)) };
            assert_eq!((from, to), (v, u as usize));
        };
        for v in 0..5 {
            for j in 0..6 {
                let u = s.hop1(v)[j];
                check(v, u, s.hop1_edge(v, j));
                for t in 0..6 {
                    check(u as usize, s.hop2(v, j)[t], s.hop2_edge(v, j, t));
                }
            }
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| sample_neighborhood(&g, &c, &cfg).unwrap());
        assert_eq!(s, single);
        let other_epoch = sample_for_epoch(&g, &c, &cfg, 1).unwrap();
        assert_ne!(s, other_epoch);
    }
}
