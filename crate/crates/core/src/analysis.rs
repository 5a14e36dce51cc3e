//! Neighbor-selection strategies as row-stochastic matrices, a concrete
//! node similarity, and the comparisons built on them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{kmeans, l2_normalize_rows, ClusterAssignment, ClusterError};
use crate::experiment::{run_node_classification, ExperimentError, ModelConfig};
use crate::graph::{split_nodes, PropertyGraph};
use crate::rng::derive_seed;
use crate::sampler::{assign_biases, normalize_biases, BiasConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("strategies cover different supports: {0}")]
    SupportMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("bias grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// `alpha * cos(p_u, p_v) + (1 - alpha) * jaccard(N_u, N_v)`.
///
/// Negative cosines are clipped to 0 so both kernels stay in `[0, 1]`; a
/// zero property vector has cosine 0 with everything.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityModel {
    pub alpha: f64,
}

impl Default for SimilarityModel {
    fn default() -> Self {
        SimilarityModel { alpha: 0.5 }
    }
}

impl SimilarityModel {
    pub fn property_similarity(&self, g: &PropertyGraph, u: usize, v: usize) -> f64 {
        let (a, b) = (g.prop(u), g.prop(v));
        let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        (a.dot(&b) / (na * nb)).clamp(0.0, 1.0)
    }

    pub fn topology_similarity(&self, g: &PropertyGraph, u: usize, v: usize) -> f64 {
        let set = |x: usize| -> Vec<usize> {
            let mut s: Vec<usize> = g.incident(x).map(|(w, _)| w).collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        let (a, b) = (set(u), set(v));
        let (mut i, mut j, mut inter) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        let union = a.len() + b.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn similarity(&self, g: &PropertyGraph, u: usize, v: usize) -> f64 {
        self.alpha * self.property_similarity(g, u, v) + (1.0 - self.alpha) * self.topology_similarity(g, u, v)
    }
}

/// Sparse `n x n` selection probabilities. Row `v` lists `v`'s neighbors in
/// the sampler's order (out-edges, then in-edges on directed graphs).
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyMatrix {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl StrategyMatrix {
    fn from_rows(g: &PropertyGraph, mut row: impl FnMut(usize) -> Vec<f64>) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for v in 0..g.n_nodes() {
            cols.extend(g.incident(v).map(|(u, _)| u));
            vals.extend(row(v));
            debug_assert_eq!(cols.len(), vals.len());
            offsets.push(cols.len());
        }
        StrategyMatrix { offsets, cols, vals }
    }

    /// Builds a strategy over `g`'s support from explicit row values.
    pub fn from_values(g: &PropertyGraph, row: impl FnMut(usize) -> Vec<f64>) -> Result<Self> {
        let m = Self::from_rows(g, row);
        if m.cols.len() != m.vals.len() {
            return Err(AnalysisError::SupportMismatch("row lengths differ from neighbor counts".into()));
        }
        Ok(m)
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, v: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[v]..self.offsets[v + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn row_sum(&self, v: usize) -> f64 {
        self.row(v).1.iter().sum()
    }

    /// Row entries with parallel edges merged.
    fn merged_row(&self, v: usize) -> BTreeMap<usize, f64> {
        let (c, x) = self.row(v);
        let mut m = BTreeMap::new();
        for (&c, &x) in c.iter().zip(x) {
            *m.entry(c).or_insert(0.0) += x;
        }
        m
    }
}

pub fn strategy_unbiased(g: &PropertyGraph) -> StrategyMatrix {
    StrategyMatrix::from_rows(g, |v| {
        let d = g.incident_degree(v);
        vec![1.0 / d as f64; d]
    })
}

/// Selection probabilities used by the sampler.
pub fn strategy_biased(g: &PropertyGraph, c: &ClusterAssignment, cfg: &BiasConfig) -> StrategyMatrix {
    StrategyMatrix::from_rows(g, |v| {
        let raw = assign_biases(g, c, cfg, v);
        if raw.is_empty() {
            Vec::new()
        } else {
            normalize_biases(&raw).expect("biases validated positive")
        }
    })
}

/// Expected similarity between a node and the neighbor it selects, averaged
/// over nodes that have neighbors.
pub fn expected_step_similarity(strategy: &StrategyMatrix, model: &SimilarityModel, g: &PropertyGraph) -> Result<f64> {
    if strategy.n_nodes() != g.n_nodes() {
        return Err(AnalysisError::SupportMismatch(format!("{} rows for {} nodes", strategy.n_nodes(), g.n_nodes())));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for v in 0..g.n_nodes() {
        let (cols, vals) = strategy.row(v);
        let expected: Vec<usize> = g.incident(v).map(|(u, _)| u).collect();
        if cols != expected.as_slice() {
            return Err(AnalysisError::SupportMismatch(format!("row {v} differs from the graph's neighbors")));
        }
        if cols.is_empty() {
            continue;
        }
        rows += 1;
        total += cols.iter().zip(vals).map(|(&u, &p)| p * model.similarity(g, v, u)).sum::<f64>();
    }
    if rows == 0 {
        return Err(AnalysisError::Invalid("graph has no edges".into()));
    }
    Ok(total / rows as f64)
}

/// The cluster-partitioned closed form of the expectation, with its
/// normalization constants `|E|/k` and
/// `|E|(k-1)/k` and its normalized biases `n_s = b_s / (b_d * same + b_s * diff)`,
/// `n_d = n_s * b_d / b_s`. Kept for reporting only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrintedFormReport {
    pub k: usize,
    pub n_edges: usize,
    pub same_cluster_term: f64,
    pub cross_cluster_term: f64,
    pub printed_total: f64,
    /// Per-step expectation under the sampler's actual distribution.
    pub per_step_expectation: f64,
}

pub fn printed_form_report(g: &PropertyGraph, c: &ClusterAssignment, cfg: &BiasConfig, model: &SimilarityModel) -> Result<PrintedFormReport> {
    let k = c.k;
    let e = g.n_input_edges();
    if k < 2 || e == 0 {
        return Err(AnalysisError::Invalid("the printed form needs k >= 2 and at least one edge".into()));
    }
    let (mut same_sum, mut cross_sum) = (0.0, 0.0);
    for v in 0..g.n_nodes() {
        let nbrs: Vec<usize> = g.incident(v).map(|(u, _)| u).collect();
        let same = nbrs.iter().filter(|&&u| c.same(u, v)).count() as f64;
        let diff = nbrs.len() as f64 - same;
        let denom = cfg.b_d * same + cfg.b_s * diff;
        if denom == 0.0 {
            continue;
        }
        let n_s = cfg.b_s / denom;
        let n_d = n_s * cfg.b_d / cfg.b_s;
        for &u in &nbrs {
            let s = model.similarity(g, v, u);
            if c.same(u, v) {
                same_sum += n_s * s;
            } else {
                cross_sum += n_d * s;
            }
        }
    }
    let same_term = same_sum / (e as f64 / k as f64);
    let cross_term = cross_sum / (e as f64 * (k - 1) as f64 / k as f64);
    let per_step = expected_step_similarity(&strategy_biased(g, c, cfg), model, g)?;
    Ok(PrintedFormReport {
        k,
        n_edges: e,
        same_cluster_term: same_term,
        cross_cluster_term: cross_term,
        printed_total: same_term + cross_term,
        per_step_expectation: per_step,
    })
}

/// Mean similarity over same-cluster pairs and over all pairs.
pub fn within_cluster_gap(g: &PropertyGraph, c: &ClusterAssignment, model: &SimilarityModel) -> Result<(f64, f64)> {
    if c.k < 2 {
        return Err(AnalysisError::Invalid("need at least two clusters".into()));
    }
    let n = g.n_nodes();
    let (within, all, n_within) = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut w = 0.0;
            let mut a = 0.0;
            let mut nw = 0usize;
            for v in u + 1..n {
                let s = model.similarity(g, u, v);
                a += s;
                if c.same(u, v) {
                    w += s;
                    nw += 1;
                }
            }
            (w, a, nw)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0, 0usize), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    if n_within == 0 {
        return Err(AnalysisError::Invalid("every cluster is a singleton".into()));
    }
    let n_pairs = n * (n - 1) / 2;
    Ok((within / n_within as f64, all / n_pairs as f64))
}

/// Entrywise L1 distance. Parallel edges are merged before comparing.
pub fn l1_strategy_distance(a: &StrategyMatrix, b: &StrategyMatrix) -> Result<f64> {
    if a.n_nodes() != b.n_nodes() {
        return Err(AnalysisError::SupportMismatch(format!("{} vs {} rows", a.n_nodes(), b.n_nodes())));
    }
    let mut total = 0.0;
    for v in 0..a.n_nodes() {
        let (ra, rb) = (a.merged_row(v), b.merged_row(v));
        if !ra.keys().eq(rb.keys()) {
            return Err(AnalysisError::SupportMismatch(format!("row {v}")));
        }
        total += ra.values().zip(rb.values()).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasFit {
    pub best_b_d: f64,
    pub best_distance: f64,
    /// `(b_d, distance)` for every grid value, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Grid search over `b_d` with `b_s = 1` for the strategy closest to `target`.
pub fn fit_bias_to_target(g: &PropertyGraph, c: &ClusterAssignment, target: &StrategyMatrix, grid: &[f64]) -> Result<BiasFit> {
    if grid.is_empty() {
        return Err(AnalysisError::EmptyGrid);
    }
    let curve: Vec<(f64, f64)> = grid
        .iter()
        .map(|&b_d| {
            let cfg = BiasConfig { b_s: 1.0, b_d, ..Default::default() };
            cfg.validate().map_err(|e| AnalysisError::Invalid(e.to_string()))?;
            Ok((b_d, l1_strategy_distance(target, &strategy_biased(g, c, &cfg))?))
        })
        .collect::<Result<_>>()?;
    let (best_b_d, best_distance) = curve.iter().copied().fold((f64::NAN, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
    Ok(BiasFit { best_b_d, best_distance, curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub b_d: f64,
    pub seed: u64,
    pub f1_micro: f64,
    pub f1_macro: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub k_grid: Vec<usize>,
    pub bd_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Template for every cell; `b_d` and the seeds are overwritten.
    pub bias: BiasConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub split_ratios: (f64, f64, f64),
}

/// Re-clusters with k-means for each `k`, trains for each `b_d` (with
/// `b_s` from the template) and records test F1. Rows come out in grid
/// order: `k`, then `b_d`, then seed.
pub fn bias_sweep(g: &PropertyGraph, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.k_grid.is_empty() || cfg.bd_grid.is_empty() || cfg.seeds.is_empty() {
        return Err(AnalysisError::EmptyGrid);
    }
    if g.node_labels().is_none() {
        return Err(AnalysisError::Invalid("bias sweep needs node labels".into()));
    }
    let normed = l2_normalize_rows(g.node_props().view());
    let mut cells = Vec::new();
    for &k in &cfg.k_grid {
        for &b_d in &cfg.bd_grid {
            for &seed in &cfg.seeds {
                cells.push((k, b_d, seed));
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(k, b_d, seed)| {
            let clusters = kmeans(normed.view(), k.min(g.n_nodes()), derive_seed(seed, "clustering"), 300)?;
            let split = split_nodes(g, cfg.split_ratios, derive_seed(seed, "node-split")).map_err(ExperimentError::from)?;
            let bias = BiasConfig { b_d, seed: derive_seed(seed, "sampler"), ..cfg.bias };
            let train = TrainConfig { epochs: cfg.epochs, seed: derive_seed(seed, "trainer"), ..cfg.train.clone() };
            let out = run_node_classification(g, &clusters, &split, &bias, &train, &cfg.model, seed)?;
            Ok(SweepRow {
                k,
                b_d,
                seed,
                f1_micro: out.metrics.f1_micro.unwrap_or(0.0),
                f1_macro: out.metrics.f1_macro.unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "k,b_d,seed,f1_micro,f1_macro")?;
    for r in rows {
        writeln!(f, "{},{:?},{},{:?},{:?}", r.k, r.b_d, r.seed, r.f1_micro, r.f1_macro)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphParts;
    use ndarray::array;

    /// `u = 0`, `v = 1`; `N_u = {a, b, c}`, `N_v = {a, b, d, e}`.
    fn seven_nodes() -> PropertyGraph {
        let (a, b, c, d, e) = (2, 3, 4, 5, 6);
        PropertyGraph::build(GraphParts {
            node_props: array![[1.0, 0.0], [0.8, 0.6], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]],
            edges: vec![(0, a), (0, b), (0, c), (1, a), (1, b), (1, d), (1, e)],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn hand_evaluated_similarity() {
        let g = seven_nodes();
        let m = SimilarityModel { alpha: 0.5 };
        assert!((m.property_similarity(&g, 0, 1) - 0.8).abs() < 1e-12);
        assert!((m.topology_similarity(&g, 0, 1) - 0.4).abs() < 1e-12);
        assert!((m.similarity(&g, 0, 1) - 0.6).abs() < 1e-12);
        assert!((m.similarity(&g, 0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(m.similarity(&g, 0, 1), m.similarity(&g, 1, 0));
    }

    #[test]
    fn orthogonal_and_disjoint_is_zero() {
        let g = PropertyGraph::build(GraphParts {
            node_props: array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 1.0]],
            edges: vec![(0, 2), (1, 3)],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(SimilarityModel::default().similarity(&g, 0, 1), 0.0);
    }

    #[test]
    fn unbiased_rows() {
        let g = PropertyGraph::build(GraphParts {
            node_props: array![[1.0], [1.0], [1.0], [1.0], [1.0]],
            edges: vec![(0, 1), (0, 2), (0, 3)],
            ..Default::default()
        })
        .unwrap();
        let q = strategy_unbiased(&g);
        assert_eq!(q.row(0).1, &[1.0 / 3.0; 3]);
        assert!(q.row(4).1.is_empty());
    }

    #[test]
    fn five_neighbor_biased_row() {
        let g = PropertyGraph::build(GraphParts {
            node_props: ndarray::Array2::zeros((6, 1)),
            edges: vec![(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)],
            ..Default::default()
        })
        .unwrap();
        let c = ClusterAssignment::from_labels(&[0, 0, 0, 0, 1, 1]);
        let p = strategy_biased(&g, &c, &BiasConfig { b_s: 1.0, b_d: 1000.0, ..Default::default() });
        let expect = [1.0 / 2003.0, 1.0 / 2003.0, 1.0 / 2003.0, 1000.0 / 2003.0, 1000.0 / 2003.0];
        for (a, b) in p.row(0).1.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let q = strategy_unbiased(&g);
        let by_hand: f64 = p.row(0).1.iter().map(|x| (x - 0.2).abs()).sum::<f64>()
            + (1..6).map(|v| (p.row(v).1[0] - q.row(v).1[0]).abs()).sum::<f64>();
        assert!((l1_strategy_distance(&p, &q).unwrap() - by_hand).abs() < 1e-15);
    }

    #[test]
    fn support_mismatch_is_reported() {
        let g1 = seven_nodes();
        let g2 = PropertyGraph::build(GraphParts { node_props: ndarray::Array2::zeros((7, 1)), edges: vec![(0, 1)], ..Default::default() }).unwrap();
        assert!(matches!(
            l1_strategy_distance(&strategy_unbiased(&g1), &strategy_unbiased(&g2)),
            Err(AnalysisError::SupportMismatch(_))
        ));
    }

    #[test]
    fn empty_grid_rejected() {
        let g = seven_nodes();
        let c = ClusterAssignment::from_labels(&[0; 7]);
        assert!(matches!(fit_bias_to_target(&g, &c, &strategy_unbiased(&g), &[]), Err(AnalysisError::EmptyGrid)));
    }
}
