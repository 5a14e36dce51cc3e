//! One full train/evaluate run for each task.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cluster_edges, direction_only_edges, ClusterAssignment, ClusterError, EdgeClusterAssignment, MAX_EDGE_CLUSTERS};
use crate::encoder::{encode, init_params, EncoderDims, EncoderError, EncoderMode, EncoderParams};
use crate::eval::{build_link_queries, f1_scores, mrr, predict_labels, rank_link_queries, EvalError, Metrics};
use crate::graph::{split_edges, EdgeSplit, GraphError, NodeSplit, PropertyGraph};
use crate::rng::derive_seed;
use crate::sampler::{sample_neighborhood, BiasConfig, SampleError};
use crate::trainer::{unit_rows, train_link_predictor, train_node_classifier, TrainConfig, TrainError, TrainSetup};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: EncoderMode,
    pub hidden: usize,
    /// Embedding width for link prediction.
    pub link_dim: usize,
    /// Affine output head after the edge-aware concatenation.
    pub out_proj: bool,
    /// Edge clusters when edges carry properties but no labels.
    pub edge_k: usize,
    pub split_by_direction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: EncoderMode::EdgeAware,
            hidden: EncoderDims::DEFAULT_HIDDEN,
            link_dim: 64,
            out_proj: true,
            edge_k: 2,
            split_by_direction: true,
        }
    }
}

/// Edge clusters for the requested mode. Falls back to plain aggregation when
/// the graph offers nothing to separate edges by (undirected, no edge data).
pub fn edge_setup(g: &PropertyGraph, model: &ModelConfig, seed: u64) -> Result<(EncoderMode, Option<EdgeClusterAssignment>)> {
    if model.mode == EncoderMode::Plain {
        return Ok((EncoderMode::Plain, None));
    }
    if g.n_edges() == 0 {
        log::info!("graph has no edges; using plain aggregation");
        return Ok((EncoderMode::Plain, None));
    }
    let split = model.split_by_direction && g.is_directed();
    let ec = if let Some(labels) = g.edge_labels() {
        let mut distinct = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let cap = if split { MAX_EDGE_CLUSTERS / 2 } else { MAX_EDGE_CLUSTERS };
        if distinct.len() > cap {
            return Err(ExperimentError::Invalid(format!("{} distinct edge labels exceed the limit of {cap}", distinct.len())));
        }
        cluster_edges(g, distinct.len(), seed, split)?
    } else if g.edge_props().is_some() {
        cluster_edges(g, model.edge_k, seed, split)?
    } else if g.is_directed() && model.split_by_direction {
        direction_only_edges(g)
    } else {
        log::info!("no edge properties, labels or direction to use; falling back to plain aggregation");
        return Ok((EncoderMode::Plain, None));
    };
    Ok((EncoderMode::EdgeAware, Some(ec)))
}

fn initial_params(g: &PropertyGraph, mode: EncoderMode, ec: Option<&EdgeClusterAssignment>, model: &ModelConfig, output: usize, seed: u64) -> Result<EncoderParams> {
    let k_e = ec.map_or(0, |e| e.k_e);
    let head = mode == EncoderMode::EdgeAware && model.out_proj;
    let dims = EncoderDims::for_mode(mode, g.prop_dim(), model.hidden, output, k_e, head);
    Ok(init_params(dims, mode, k_e, head, seed)?)
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: EncoderParams,
    pub mode: EncoderMode,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub params: EncoderParams,
    pub mode: EncoderMode,
    pub loss_history: Vec<f64>,
    pub metrics: Metrics,
    /// Encoder output for every node, in node order.
    pub embeddings: Array2<f64>,
}

impl Outcome {
    fn new(trained: Trained, (metrics, embeddings): (Metrics, Array2<f64>)) -> Self {
        Outcome { params: trained.params, mode: trained.mode, loss_history: trained.loss_history, metrics, embeddings }
    }
}

pub fn train_node_classification(
    g: &PropertyGraph,
    clusters: &ClusterAssignment,
    split: &NodeSplit,
    bias: &BiasConfig,
    train: &TrainConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Trained> {
    g.node_labels().ok_or(TrainError::NoLabels)?;
    let (mode, ec) = edge_setup(g, model, derive_seed(seed, "edge-clusters"))?;
    let params = initial_params(g, mode, ec.as_ref(), model, g.label_dim(), derive_seed(seed, "encoder-init"))?;
    let setup = TrainSetup { g, clusters, edge_clusters: ec.as_ref(), bias: *bias };
    let result = train_node_classifier(&setup, train, params, &split.train)?;
    Ok(Trained { params: result.params, mode, loss_history: result.loss_history })
}

/// Encodes every node with `params` and scores F1 on the split's test nodes.
/// Returns the metrics and the full embedding matrix.
pub fn evaluate_node_classification(
    g: &PropertyGraph,
    clusters: &ClusterAssignment,
    split: &NodeSplit,
    bias: &BiasConfig,
    model: &ModelConfig,
    params: &EncoderParams,
    seed: u64,
) -> Result<(Metrics, Array2<f64>)> {
    let labels = g.node_labels().ok_or(TrainError::NoLabels)?;
    let (_, ec) = edge_setup(g, model, derive_seed(seed, "edge-clusters"))?;
    let sample = sample_neighborhood(g, clusters, bias)?;
    let all: Vec<usize> = (0..g.n_nodes()).collect();
    let embeddings = encode(g, &sample, ec.as_ref(), params, &all)?;
    let test_logits = embeddings.select(ndarray::Axis(0), &split.test);
    let pred = predict_labels(test_logits.view(), g.is_multi_label());
    let truth = labels.select(ndarray::Axis(0), &split.test);
    let (micro, macro_) = f1_scores(pred.view(), truth.view())?;
    let metrics = Metrics { f1_micro: Some(micro), f1_macro: Some(macro_), mrr: None, n_evaluated: split.test.len() };
    Ok((metrics, embeddings))
}

/// Trains on the split's training nodes and scores F1 on its test nodes.
pub fn run_node_classification(
    g: &PropertyGraph,
    clusters: &ClusterAssignment,
    split: &NodeSplit,
    bias: &BiasConfig,
    train: &TrainConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Outcome> {
    let trained = train_node_classification(g, clusters, split, bias, train, model, seed)?;
    let evaluated = evaluate_node_classification(g, clusters, split, bias, model, &trained.params, seed)?;
    Ok(Outcome::new(trained, evaluated))
}

pub const EVAL_NEGATIVES: usize = 99;
pub const LINK_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Held-out edges and the graph of training edges that the encoder sees.
pub struct LinkData {
    pub split: EdgeSplit,
    pub train_graph: PropertyGraph,
}

pub fn link_data(g: &PropertyGraph, seed: u64) -> Result<LinkData> {
    let split = split_edges(g, LINK_SPLIT, derive_seed(seed, "edge-split"))?;
    let train_graph = g.edge_subgraph(&split.train)?;
    Ok(LinkData { split, train_graph })
}

pub fn train_link_prediction(
    data: &LinkData,
    clusters: &ClusterAssignment,
    bias: &BiasConfig,
    train: &TrainConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Trained> {
    let g_train = &data.train_graph;
    let (mode, ec) = edge_setup(g_train, model, derive_seed(seed, "edge-clusters"))?;
    let params = initial_params(g_train, mode, ec.as_ref(), model, model.link_dim, derive_seed(seed, "encoder-init"))?;
    let setup = TrainSetup { g: g_train, clusters, edge_clusters: ec.as_ref(), bias: *bias };
    let positives: Vec<(usize, usize)> = g_train.canonical_edges().iter().map(|&e| (g_train.source(e), g_train.target(e))).collect();
    let result = train_link_predictor(&setup, train, params, &positives)?;
    Ok(Trained { params: result.params, mode, loss_history: result.loss_history })
}

/// Encodes with the training-edge graph and scores MRR on the test edges
/// against candidates drawn from non-neighbors in the full graph `g`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_link_prediction(
    g: &PropertyGraph,
    data: &LinkData,
    clusters: &ClusterAssignment,
    bias: &BiasConfig,
    model: &ModelConfig,
    params: &EncoderParams,
    normalize: bool,
    seed: u64,
) -> Result<(Metrics, Array2<f64>)> {
    let g_train = &data.train_graph;
    let (_, ec) = edge_setup(g_train, model, derive_seed(seed, "edge-clusters"))?;
    let sample = sample_neighborhood(g_train, clusters, bias)?;
    let all: Vec<usize> = (0..g.n_nodes()).collect();
    let mut embeddings = encode(g_train, &sample, ec.as_ref(), params, &all)?;
    if normalize {
        embeddings = unit_rows(&embeddings).0;
    }
    let test_pairs: Vec<(usize, usize)> = data.split.test.iter().map(|&e| (g.source(e), g.target(e))).collect();
    let queries = build_link_queries(g, &test_pairs, EVAL_NEGATIVES, derive_seed(seed, "link-eval"));
    let ranks = rank_link_queries(embeddings.view(), &queries)?;
    let score = mrr(&ranks)?;
    let metrics = Metrics { f1_micro: None, f1_macro: None, mrr: Some(score), n_evaluated: ranks.len() };
    Ok((metrics, embeddings))
}

/// Splits edges 80/10/10, trains on the training-edge subgraph and scores
/// MRR on the test edges.
pub fn run_link_prediction(
    g: &PropertyGraph,
    clusters: &ClusterAssignment,
    bias: &BiasConfig,
    train: &TrainConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Outcome> {
    let data = link_data(g, seed)?;
    let trained = train_link_prediction(&data, clusters, bias, train, model, seed)?;
    let evaluated = evaluate_link_prediction(g, &data, clusters, bias, model, &trained.params, train.normalize_embeddings, seed)?;
    Ok(Outcome::new(trained, evaluated))
}
