//! Property-based clustering of nodes and edges.
//!
//! Node clusters decide, for every neighbor pair, whether the neighbor is
//! "similar" (same cluster) or "dissimilar" during biased sampling. Edge
//! clusters pick the weight matrices used by the edge-aware encoder.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Direction, EdgeRef, PropertyGraph};

pub const MAX_EDGE_CLUSTERS: usize = 8;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of rows ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("all {0} rows are identical; cannot form more than one cluster")]
    Degenerate(usize),
    #[error("dbscan found no core point (eps = {eps}, min_pts = {min_pts}); k-distance heuristic suggests eps = {suggested_eps}")]
    AllNoise { eps: f64, min_pts: usize, suggested_eps: f64 },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("graph has no edge properties or edge labels to cluster")]
    NoEdgeFeatures,
    #[error("{0} edge clusters requested; at most {MAX_EDGE_CLUSTERS} allowed")]
    TooManyEdgeClusters(usize),
    #[error("graph has no edges")]
    NoEdges,
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Kmeans,
    Dbscan,
    /// Supplied directly (tests, ground-truth partitions).
    Given,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub k: usize,
    pub method: ClusterMethod,
    /// Final inertia for k-means, eps for dbscan.
    pub inertia_or_eps: f64,
}

impl ClusterAssignment {
    /// Wraps an arbitrary labelling, compacting ids to `0..k`.
    pub fn from_labels(labels: &[usize]) -> Self {
        let (assignment, k) = compact(labels);
        ClusterAssignment { assignment, k, method: ClusterMethod::Given, inertia_or_eps: 0.0 }
    }

    #[inline]
    pub fn cluster_of(&self, v: usize) -> usize {
        self.assignment[v]
    }

    #[inline]
    pub fn same(&self, u: usize, v: usize) -> bool {
        self.assignment[u] == self.assignment[v]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Relabels ids in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-wise L2 normalization; zero rows are left as they are.
pub fn l2_normalize_rows(props: ArrayView2<f64>) -> Array2<f64> {
    let mut out = props.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Full output of a k-means run.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub clusters: ClusterAssignment,
    pub centroids: Array2<f64>,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans(props: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    kmeans_fit(props, k, seed, max_iter).map(|f| f.clusters)
}

/// Lloyd's algorithm from a seeded k-means++ start. Empty clusters are
/// reseeded at the point farthest from its centroid.
pub fn kmeans_fit(props: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansFit> {
    let n = props.nrows();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if max_iter == 0 {
        return Err(ClusterError::Param("max_iter must be at least 1".into()));
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    if props.iter().any(|x| !x.is_finite()) {
        return Err(ClusterError::Param("non-finite property value".into()));
    }
    if k > 1 && props.rows().into_iter().all(|r| r == props.row(0)) {
        return Err(ClusterError::Degenerate(n));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(props, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        let nearest: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| nearest_centroid(props.row(i), &centroids)).collect();
        let changed = nearest.iter().zip(&assignment).any(|(&(c, _), &a)| c != a);
        for (a, &(c, _)) in assignment.iter_mut().zip(&nearest) {
            *a = c;
        }
        let mut dists: Vec<f64> = nearest.iter().map(|&(_, d)| d).collect();
        repair_empty(props, &mut centroids, &mut assignment, &mut dists, k);
        history.push(dists.iter().sum());
        if !changed || iterations >= max_iter {
            break;
        }
        update_centroids(props, &assignment, &mut centroids);
    }

    let inertia = *history.last().expect("at least one iteration");
    let raw = assignment.clone();
    let (assignment, k_used) = compact(&raw);
    // compaction renumbers clusters; keep centroids aligned with the new ids
    let mut order = vec![0; k_used];
    for (&new_id, &old_id) in assignment.iter().zip(&raw) {
        order[new_id] = old_id;
    }
    let centroids = centroids.select(Axis(0), &order);
    Ok(KMeansFit {
        clusters: ClusterAssignment { assignment, k: k_used, method: ClusterMethod::Kmeans, inertia_or_eps: inertia },
        centroids,
        inertia_history: history,
        iterations,
    })
}

fn plus_plus_init(props: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = props.nrows();
    let mut centroids = Array2::zeros((k, props.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&props.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(props.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&props.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(props.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn nearest_centroid(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn repair_empty(props: ArrayView2<f64>, centroids: &mut Array2<f64>, assignment: &mut [usize], dists: &mut [f64], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        // farthest point whose cluster can spare it
        let far = (0..assignment.len())
            .filter(|&i| counts[assignment[i]] > 1 && dists[i] > 0.0)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(far) = far else { return };
        centroids.row_mut(empty).assign(&props.row(far));
        assignment[far] = empty;
        dists[far] = 0.0;
    }
}

fn update_centroids(props: ArrayView2<f64>, assignment: &[usize], centroids: &mut Array2<f64>) {
    let k = centroids.nrows();
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row += &props.row(i);
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mut row = centroids.row_mut(c);
            row.assign(&sums.row(c));
            row /= counts[c] as f64;
        }
    }
}

/// Median distance to the `k`-th nearest neighbor (excluding the point itself).
pub fn k_distance_eps(props: ArrayView2<f64>, k: usize) -> f64 {
    let n = props.nrows();
    if n < 2 {
        return 0.0;
    }
    let k = k.clamp(1, n - 1);
    let mut kth: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(props.row(i), props.row(j))).collect();
            let (_, kd, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            kd.sqrt()
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let mid = kth.len() / 2;
    if kth.len() % 2 == 1 {
        kth[mid]
    } else {
        0.5 * (kth[mid - 1] + kth[mid])
    }
}

/// Density clustering on Euclidean distance. Core points have at least
/// `min_pts` points (themselves included) within `eps`. Border and noise
/// points join the cluster of their nearest core point, so every row is
/// assigned and the result does not depend on row order.
pub fn dbscan(props: ArrayView2<f64>, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(ClusterError::Param(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(ClusterError::Param("min_pts must be at least 1".into()));
    }
    let n = props.nrows();
    if n == 0 {
        return Err(ClusterError::TooManyClusters { k: 1, n: 0 });
    }
    let eps2 = eps * eps;
    let region: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| sq_dist(props.row(i), props.row(j)) <= eps2).collect()).collect();
    let core: Vec<bool> = region.iter().map(|r| r.len() >= min_pts).collect();
    if !core.iter().any(|&c| c) {
        return Err(ClusterError::AllNoise { eps, min_pts, suggested_eps: k_distance_eps(props, min_pts) });
    }

    const UNSET: usize = usize::MAX;
    let mut label = vec![UNSET; n];
    let mut k = 0;
    for start in 0..n {
        if !core[start] || label[start] != UNSET {
            continue;
        }
        label[start] = k;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &region[p] {
                if core[q] && label[q] == UNSET {
                    label[q] = k;
                    stack.push(q);
                }
            }
        }
        k += 1;
    }
    let cores: Vec<usize> = (0..n).filter(|&i| core[i]).collect();
    for i in 0..n {
        if label[i] == UNSET {
            let nearest = cores
                .iter()
                .copied()
                .min_by(|&a, &b| sq_dist(props.row(i), props.row(a)).total_cmp(&sq_dist(props.row(i), props.row(b))))
                .expect("at least one core point");
            label[i] = label[nearest];
        }
    }
    Ok(ClusterAssignment { assignment: label, k, method: ClusterMethod::Dbscan, inertia_or_eps: eps })
}

/// Cluster count close to the average degree, never below 2.
pub fn choose_k(g: &PropertyGraph) -> usize {
    choose_k_from_counts(g.n_input_edges(), g.n_nodes())
}

pub fn choose_k_from_counts(edges: usize, nodes: usize) -> usize {
    if nodes == 0 {
        return 2;
    }
    ((edges as f64 / nodes as f64).round() as usize).max(2)
}

/// How nodes get clustered in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeClustering {
    /// DBSCAN up to `AUTO_DBSCAN_LIMIT` nodes, k-means with [`choose_k`] above.
    Auto,
    Kmeans { k: Option<usize>, max_iter: usize },
    Dbscan { eps: Option<f64>, min_pts: usize },
}

pub const AUTO_DBSCAN_LIMIT: usize = 100_000;
pub const DEFAULT_MIN_PTS: usize = 4;
pub const DEFAULT_MAX_ITER: usize = 300;

/// Clusters the L2-normalized node properties of `g`.
pub fn cluster_nodes(g: &PropertyGraph, method: NodeClustering, seed: u64) -> Result<ClusterAssignment> {
    let normed = l2_normalize_rows(g.node_props().view());
    let method = match method {
        NodeClustering::Auto if g.n_nodes() <= AUTO_DBSCAN_LIMIT => {
            NodeClustering::Dbscan { eps: None, min_pts: DEFAULT_MIN_PTS }
        }
        NodeClustering::Auto => NodeClustering::Kmeans { k: None, max_iter: DEFAULT_MAX_ITER },
        m => m,
    };
    match method {
        NodeClustering::Kmeans { k, max_iter } => {
            let k = k.unwrap_or_else(|| choose_k(g)).min(g.n_nodes());
            kmeans(normed.view(), k, seed, max_iter)
        }
        NodeClustering::Dbscan { eps, min_pts } => {
            let eps = match eps {
                Some(e) => e,
                None => k_distance_eps(normed.view(), DEFAULT_MIN_PTS),
            };
            // identical rows give eps = 0; any positive radius then works
            let eps = if eps > 0.0 { eps } else { f64::EPSILON };
            dbscan(normed.view(), eps, min_pts)
        }
        NodeClustering::Auto => unreachable!(),
    }
}

/// Edge slot -> cluster map. When `direction_split` is set, slots walked
/// backwards (in-edges) use `in_assignment`, whose ids are offset past the
/// out-edge clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeClusterAssignment {
    pub assignment: Vec<usize>,
    pub in_assignment: Option<Vec<usize>>,
    pub k_e: usize,
    pub direction_split: bool,
}

impl EdgeClusterAssignment {
    /// Single cluster for every slot.
    pub fn uniform(n_edges: usize) -> Self {
        EdgeClusterAssignment { assignment: vec![0; n_edges], in_assignment: None, k_e: 1, direction_split: false }
    }

    #[inline]
    pub fn cluster_of(&self, e: EdgeRef) -> usize {
        match (&self.in_assignment, e.incoming) {
            (Some(ins), true) => ins[e.edge],
            _ => self.assignment[e.edge],
        }
    }

    pub fn n_edges(&self) -> usize {
        self.assignment.len()
    }
}

fn label_clusters(labels: &[i64], k_e: usize) -> Result<(Vec<usize>, usize)> {
    let mut distinct: Vec<i64> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    // descending so that `+1` maps to 0 and `-1` to 1 for signed graphs
    distinct.reverse();
    if distinct.len() > k_e {
        return Err(ClusterError::Param(format!("{} distinct edge labels but k_e = {k_e}", distinct.len())));
    }
    let ids = labels.iter().map(|l| distinct.iter().position(|d| d == l).expect("label present")).collect();
    Ok((ids, distinct.len()))
}

/// Clusters edge slots by their properties (or passes edge labels through).
/// On directed graphs with `split_by_direction`, out- and in-traversals are
/// clustered independently and the in-ids are offset by the out count.
pub fn cluster_edges(g: &PropertyGraph, k_e: usize, seed: u64, split_by_direction: bool) -> Result<EdgeClusterAssignment> {
    if k_e == 0 {
        return Err(ClusterError::ZeroK);
    }
    let split = split_by_direction && g.is_directed();
    let total = if split { 2 * k_e } else { k_e };
    if total > MAX_EDGE_CLUSTERS {
        return Err(ClusterError::TooManyEdgeClusters(total));
    }
    if g.n_edges() == 0 {
        return Err(ClusterError::NoEdges);
    }
    let one_pass = |pass_seed: u64| -> Result<(Vec<usize>, usize)> {
        if let Some(labels) = g.edge_labels() {
            label_clusters(labels, k_e)
        } else if let Some(ep) = g.edge_props() {
            let k = k_e.min(g.n_edges());
            let fit = match kmeans(ep.view(), k, pass_seed, DEFAULT_MAX_ITER) {
                Err(ClusterError::Degenerate(_)) => return Ok((vec![0; g.n_edges()], 1)),
                other => other?,
            };
            Ok((fit.assignment, fit.k))
        } else {
            Err(ClusterError::NoEdgeFeatures)
        }
    };
    let (assignment, k_out) = one_pass(seed)?;
    if !split {
        return Ok(EdgeClusterAssignment { assignment, in_assignment: None, k_e: k_out, direction_split: false });
    }
    let (ins, k_in) = one_pass(crate::rng::mix(seed, &[1]))?;
    let in_assignment = ins.into_iter().map(|c| c + k_out).collect();
    Ok(EdgeClusterAssignment { assignment, in_assignment: Some(in_assignment), k_e: k_out + k_in, direction_split: true })
}

/// Edge clustering that only separates traversal direction (directed
/// graphs without edge features).
pub fn direction_only_edges(g: &PropertyGraph) -> EdgeClusterAssignment {
    let n = g.n_edges();
    if g.is_directed() {
        EdgeClusterAssignment { assignment: vec![0; n], in_assignment: Some(vec![1; n]), k_e: 2, direction_split: true }
    } else {
        EdgeClusterAssignment::uniform(n)
    }
}

/// Neighbor counts `(same, different)` of `v` under `c`; used by reports.
pub fn neighbor_split(g: &PropertyGraph, c: &ClusterAssignment, v: usize) -> (usize, usize) {
    let nb = g.neighbors(v, Direction::Out).expect("valid node");
    let same = nb.iter().filter(|&&u| c.same(u, v)).count();
    (same, nb.len() - same)
}
