use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GraphError, PropertyGraph, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles the nodes and cuts them into train/val/test. Validation and test
/// get `floor(ratio * n)` nodes; the remainder goes to train.
pub fn split_nodes(g: &PropertyGraph, ratios: (f64, f64, f64), seed: u64) -> Result<NodeSplit> {
    split_count(g.n_nodes(), ratios, seed)
}

/// Canonical edge slots cut into train/val/test. An undirected edge and its
/// twin always share a fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub fn split_edges(g: &PropertyGraph, ratios: (f64, f64, f64), seed: u64) -> Result<EdgeSplit> {
    let canon = g.canonical_edges();
    if canon.is_empty() {
        return Err(GraphError::Invalid("graph has no edges to split".into()));
    }
    let s = split_count(canon.len(), ratios, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| canon[i]).collect();
    Ok(EdgeSplit { train: pick(s.train), val: pick(s.val), test: pick(s.test), seed })
}

pub(crate) fn split_count(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<NodeSplit> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(GraphError::BadRatios(ratios));
    }
    if n < 3 {
        return Err(GraphError::TooFewNodes(n));
    }
    // the epsilon absorbs products like 0.7 * 10 landing just under 7
    let n_val = (va * n as f64 + 1e-9).floor() as usize;
    let n_test = (te * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n - n_val - n_test;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(NodeSplit { train, val, test, seed })
}
