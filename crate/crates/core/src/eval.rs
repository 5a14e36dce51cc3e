//! F1 scores for node classification, MRR for link prediction.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::PropertyGraph;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("nothing to evaluate")]
    Empty,
    #[error("ranks start at 1, got {0}")]
    BadRank(usize),
    #[error("query {0}: candidate set is missing the true target")]
    MissingTarget(usize),
    #[error("query {0}: needs at least two candidates")]
    TooFewCandidates(usize),
    #[error("node {0} is out of range")]
    NodeOutOfRange(usize),
    #[error("row {0} of the truth matrix has no positive label")]
    NoPositive(usize),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_micro: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_macro: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    pub n_evaluated: usize,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// `(micro, macro)` F1. Classes with no true and no predicted positives
/// score 0.
pub fn f1_scores(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<(f64, f64)> {
    if pred.dim() != truth.dim() {
        return Err(EvalError::Shape(pred.dim(), truth.dim()));
    }
    if truth.nrows() == 0 || truth.ncols() == 0 {
        return Err(EvalError::Empty);
    }
    if let Some(r) = truth.rows().into_iter().position(|row| row.iter().all(|&x| x == 0)) {
        return Err(EvalError::NoPositive(r));
    }
    let k = truth.ncols();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (p_row, t_row) in pred.rows().into_iter().zip(truth.rows()) {
        for c in 0..k {
            match (p_row[c] != 0, t_row[c] != 0) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_ = (0..k).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / k as f64;
    Ok((micro, macro_))
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(EvalError::BadRank(r));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkQuery {
    pub source: usize,
    pub target: usize,
    pub candidates: Vec<usize>,
}

/// Rank of the true target among the candidates by dot-product score.
/// Candidates tying with the target count as ranked ahead of it.
pub fn rank_link_queries(emb: ArrayView2<f64>, queries: &[LinkQuery]) -> Result<Vec<usize>> {
    let n = emb.nrows();
    queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            if q.candidates.len() < 2 {
                return Err(EvalError::TooFewCandidates(qi));
            }
            if let Some(&x) = q.candidates.iter().chain([&q.source, &q.target]).find(|&&x| x >= n) {
                return Err(EvalError::NodeOutOfRange(x));
            }
            let at = q.candidates.iter().position(|&c| c == q.target).ok_or(EvalError::MissingTarget(qi))?;
            let src = emb.row(q.source);
            let score = |c: usize| src.dot(&emb.row(c));
            let target_score = score(q.target);
            let ahead = q.candidates.iter().enumerate().filter(|&(i, &c)| i != at && score(c) >= target_score).count();
            Ok(1 + ahead)
        })
        .collect()
}

/// One query per test pair: the target plus up to `n_negatives` distinct
/// nodes that are neither the source, the target, nor neighbors of the source.
pub fn build_link_queries(g: &PropertyGraph, pairs: &[(usize, usize)], n_negatives: usize, seed: u64) -> Vec<LinkQuery> {
    let n = g.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|&(u, v)| {
            let eligible = |x: usize| x != u && x != v && !g.has_edge(u, x) && !g.has_edge(x, u);
            let mut chosen = HashSet::new();
            let mut candidates = vec![v];
            let available = (0..n).filter(|&x| eligible(x)).count();
            let want = n_negatives.min(available);
            if want * 2 >= available {
                // dense case: shuffle the eligible list instead of rejecting
                let mut pool: Vec<usize> = (0..n).filter(|&x| eligible(x)).collect();
                for i in 0..want {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                candidates.extend_from_slice(&pool[..want]);
            } else {
                while candidates.len() < want + 1 {
                    let x = rng.random_range(0..n);
                    if eligible(x) && chosen.insert(x) {
                        candidates.push(x);
                    }
                }
            }
            LinkQuery { source: u, target: v, candidates }
        })
        .collect()
}

/// Argmax per row for single-label data, `sigmoid(x) >= 0.5` (i.e. `x >= 0`)
/// for multi-label data.
pub fn predict_labels(logits: ArrayView2<f64>, multi_label: bool) -> Array2<u8> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(logits.rows()) {
        if multi_label {
            for (o, &x) in o.iter_mut().zip(row) {
                *o = u8::from(x >= 0.0);
            }
        } else if let Some((best, _)) = row.iter().enumerate().fold(None, |acc: Option<(usize, f64)>, (i, &x)| match acc {
            Some((_, b)) if b >= x => acc,
            _ => Some((i, x)),
        }) {
            o[best] = 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_prediction() {
        let t = array![[1u8, 0], [0, 1], [1, 1]];
        assert_eq!(f1_scores(t.view(), t.view()).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn hand_tallied_case() {
        let pred = array![[1u8, 0], [1, 0], [0, 1], [0, 0]];
        let truth = array![[1u8, 0], [0, 1], [0, 1], [0, 1]];
        let (micro, macro_) = f1_scores(pred.view(), truth.view()).unwrap();
        // pooled TP=2, FP=1, FN=2
        assert!((micro - 4.0 / 7.0).abs() < 1e-12);
        assert!((macro_ - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let truth = array![[1u8, 0], [0, 1]];
        assert_eq!(f1_scores(Array2::zeros((2, 2)).view(), truth.view()).unwrap(), (0.0, 0.0));
        assert!(matches!(f1_scores(Array2::zeros((2, 3)).view(), truth.view()), Err(EvalError::Shape(..))));
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 4]).unwrap() - 0.583_333_333_333_333_4).abs() < 1e-12);
        assert!((mrr(&[10]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(mrr(&[]), Err(EvalError::Empty));
        assert_eq!(mrr(&[0]), Err(EvalError::BadRank(0)));
    }

    #[test]
    fn ranking_examples() {
        let emb = array![[1.0, 0.0], [5.0, 0.0], [4.0, 0.0], [3.0, 0.0], [2.0, 0.0], [1.0, 0.0]];
        let q = |t| LinkQuery { source: 0, target: t, candidates: vec![1, 2, 3, 4, 5] };
        assert_eq!(rank_link_queries(emb.view(), &[q(1), q(3)]).unwrap(), vec![1, 3]);
        let flat = Array2::from_elem((5, 2), 1.0);
        let tie = LinkQuery { source: 0, target: 1, candidates: vec![1, 2, 3, 4] };
        assert_eq!(rank_link_queries(flat.view(), &[tie]).unwrap(), vec![4]);
        let missing = LinkQuery { source: 0, target: 1, candidates: vec![2, 3] };
        assert_eq!(rank_link_queries(flat.view(), &[missing]), Err(EvalError::MissingTarget(0)));
    }

    #[test]
    fn argmax_and_threshold() {
        let logits = array![[0.1, 2.0, -1.0], [-0.5, -0.2, -3.0]];
        assert_eq!(predict_labels(logits.view(), false), array![[0u8, 1, 0], [0, 1, 0]]);
        assert_eq!(predict_labels(logits.view(), true), array![[1u8, 1, 0], [0, 0, 0]]);
    }
}
