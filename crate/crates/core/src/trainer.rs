//! Minibatch training of encoder parameters with Adam.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterAssignment, EdgeClusterAssignment};
use crate::encoder::{self, EncoderError, EncoderParams};
use crate::graph::PropertyGraph;
use crate::rng::mix;
use crate::sampler::{sample_for_epoch, sample_neighborhood, BiasConfig, SampleError, SampledGraph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("node classification needs node labels")]
    NoLabels,
    #[error("link prediction needs at least one training edge")]
    NoEdges,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClass,
    LinkPred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub neg_samples: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub resample_per_epoch: bool,
    /// Scale link-prediction embeddings to unit length before scoring.
    pub normalize_embeddings: bool,
}

impl TrainConfig {
    pub fn for_task(task: Task, seed: u64) -> Self {
        TrainConfig {
            task,
            learning_rate: 0.01,
            epochs: match task {
                Task::NodeClass => 100,
                Task::LinkPred => 1,
            },
            batch_size: 512,
            neg_samples: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            resample_per_epoch: true,
            normalize_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.task == Task::LinkPred && self.neg_samples == 0 {
            return Err(TrainError::Config("link prediction needs at least one negative sample".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(TrainError::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross entropy over every entry, and its gradient.
pub fn bce_loss(logits: ArrayView2<f64>, targets: ArrayView2<u8>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != targets.dim() {
        return Err(TrainError::Config(format!("logits {:?} vs targets {:?}", logits.dim(), targets.dim())));
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(TrainError::NonFinite("logits"));
    }
    if targets.iter().any(|&y| y > 1) {
        return Err(TrainError::Config("targets must be 0 or 1".into()));
    }
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    ndarray::Zip::from(&mut grad).and(&logits).and(&targets).for_each(|g, &x, &y| {
        let y = f64::from(y);
        // -[y ln s(x) + (1-y) ln(1-s(x))] = softplus(x) - x y
        loss += softplus(x) - x * y;
        *g = (sigmoid(x) - y) / n;
    });
    Ok((loss / n, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkLoss {
    pub loss: f64,
    pub d_u: Array1<f64>,
    pub d_v: Array1<f64>,
    pub d_negatives: Vec<Array1<f64>>,
}

/// Negative-sampling loss `-ln s(u.v) - sum ln s(-u.n)`.
pub fn link_loss(z_u: ArrayView1<f64>, z_v: ArrayView1<f64>, negatives: &[ArrayView1<f64>]) -> Result<LinkLoss> {
    if z_u.is_empty() || z_u.len() != z_v.len() || negatives.iter().any(|n| n.len() != z_u.len()) {
        return Err(TrainError::Config("link loss vectors must be nonempty and equally long".into()));
    }
    if negatives.is_empty() {
        return Err(TrainError::Config("link loss needs at least one negative".into()));
    }
    let pos = z_u.dot(&z_v);
    let mut loss = softplus(-pos);
    let g_pos = sigmoid(pos) - 1.0;
    let mut d_u = &z_v * g_pos;
    let d_v = &z_u * g_pos;
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for n in negatives {
        let score = z_u.dot(n);
        loss += softplus(score);
        let g = sigmoid(score);
        d_u.scaled_add(g, n);
        d_negatives.push(&z_u * g);
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("link loss"));
    }
    Ok(LinkLoss { loss, d_u, d_v, d_negatives })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut EncoderParams, grads: &EncoderParams, state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(state.m.tensors_mut()).zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Everything the encoder needs besides its parameters.
#[derive(Clone, Copy)]
pub struct TrainSetup<'a> {
    pub g: &'a PropertyGraph,
    pub clusters: &'a ClusterAssignment,
    pub edge_clusters: Option<&'a EdgeClusterAssignment>,
    pub bias: BiasConfig,
}

impl TrainSetup<'_> {
    pub fn sample(&self, epoch: usize, resample: bool) -> Result<SampledGraph> {
        Ok(if resample {
            sample_for_epoch(self.g, self.clusters, &self.bias, epoch)?
        } else {
            sample_neighborhood(self.g, self.clusters, &self.bias)?
        })
    }
}

pub enum Objective<'a> {
    /// Rows of the graph's label matrix are the targets.
    NodeClass { nodes: &'a [usize] },
    /// Positive `(source, target)` pairs; negatives are drawn per epoch.
    LinkPred { positives: &'a [(usize, usize)] },
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: EncoderParams,
    pub adam: AdamState,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Loss and gradient of the node-classification objective on `nodes`.
pub fn node_class_loss_and_grad(
    setup: &TrainSetup,
    sample: &SampledGraph,
    params: &EncoderParams,
    nodes: &[usize],
) -> Result<(f64, EncoderParams)> {
    let labels = setup.g.node_labels().ok_or(TrainError::NoLabels)?;
    let fwd = encoder::forward(setup.g, sample, setup.edge_clusters, params, nodes)?;
    if fwd.output.ncols() != labels.ncols() {
        return Err(TrainError::Config(format!(
            "encoder output width {} differs from label width {}",
            fwd.output.ncols(),
            labels.ncols()
        )));
    }
    let targets = labels.select(ndarray::Axis(0), nodes);
    let (loss, d_out) = bce_loss(fwd.output.view(), targets.view())?;
    let grads = fwd.backward(params, d_out.view())?;
    Ok((loss, grads))
}

/// Loss (mean over positives) and gradient of the link objective. Each entry
/// of `negatives` lists the negatives for the positive at the same index.
pub fn link_loss_and_grad(
    setup: &TrainSetup,
    sample: &SampledGraph,
    params: &EncoderParams,
    positives: &[(usize, usize)],
    negatives: &[Vec<usize>],
    normalize: bool,
) -> Result<(f64, EncoderParams)> {
    if positives.is_empty() || positives.len() != negatives.len() {
        return Err(TrainError::NoEdges);
    }
    let nodes: Vec<usize> = positives
        .iter()
        .zip(negatives)
        .flat_map(|(&(u, v), negs)| [u, v].into_iter().chain(negs.iter().copied()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let fwd = encoder::forward(setup.g, sample, setup.edge_clusters, params, &nodes)?;
    let (z, norms) = if normalize {
        let (z, norms) = unit_rows(&fwd.output);
        (z, Some(norms))
    } else {
        (fwd.output.clone(), None)
    };
    let mut d_z = Array2::zeros(z.raw_dim());
    let scale = 1.0 / positives.len() as f64;
    let mut total = 0.0;
    for (&(u, v), negs) in positives.iter().zip(negatives) {
        let neg_views: Vec<ArrayView1<f64>> = negs.iter().map(|n| z.row(rows[n])).collect();
        let ll = link_loss(z.row(rows[&u]), z.row(rows[&v]), &neg_views)?;
        total += ll.loss;
        d_z.row_mut(rows[&u]).scaled_add(scale, &ll.d_u);
        d_z.row_mut(rows[&v]).scaled_add(scale, &ll.d_v);
        for (n, d) in negs.iter().zip(&ll.d_negatives) {
            d_z.row_mut(rows[n]).scaled_add(scale, d);
        }
    }
    let d_out = match norms {
        // d(z/|z|) = (I - u u^T) g / |z|
        Some(norms) => {
            let mut d = d_z;
            for ((mut g, u), n) in d.rows_mut().into_iter().zip(z.rows()).zip(norms) {
                let along = g.dot(&u);
                g.scaled_add(-along, &u);
                g /= n;
            }
            d
        }
        None => d_z,
    };
    let grads = fwd.backward(params, d_out.view())?;
    Ok((total * scale, grads))
}

/// Rows scaled to unit L2 norm, with the norms used (floored to avoid
/// division by zero).
pub fn unit_rows(z: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let mut out = z.clone();
    for (mut r, n) in out.rows_mut().into_iter().zip(&norms) {
        r /= *n;
    }
    (out, norms)
}

/// Uniform negatives for `(u, v)`: never `u`, never `v`, and not a neighbor of
/// `u` unless `u` is adjacent to everything else.
pub fn draw_negatives(g: &PropertyGraph, u: usize, v: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n_nodes();
    let mut out = Vec::with_capacity(count);
    if n <= 2 {
        return out;
    }
    const TRIES: usize = 64;
    while out.len() < count {
        let mut pick = None;
        for _ in 0..TRIES {
            let x = rng.random_range(0..n);
            if x != u && x != v && !g.has_edge(u, x) {
                pick = Some(x);
                break;
            }
        }
        let x = pick.unwrap_or_else(|| loop {
            let x = rng.random_range(0..n);
            if x != u && x != v {
                break x;
            }
        });
        out.push(x);
    }
    out
}

pub fn train(setup: &TrainSetup, cfg: &TrainConfig, params: EncoderParams, objective: Objective) -> Result<TrainResult> {
    match objective {
        Objective::NodeClass { nodes } => train_node_classifier(setup, cfg, params, nodes),
        Objective::LinkPred { positives } => train_link_predictor(setup, cfg, params, positives),
    }
}

pub fn train_node_classifier(setup: &TrainSetup, cfg: &TrainConfig, params: EncoderParams, nodes: &[usize]) -> Result<TrainResult> {
    cfg.validate()?;
    if setup.g.node_labels().is_none() {
        return Err(TrainError::NoLabels);
    }
    if nodes.is_empty() {
        return Err(TrainError::Config("no training nodes".into()));
    }
    let mut run = Run::new(setup, cfg, params)?;
    let mut order = nodes.to_vec();
    for epoch in 0..cfg.epochs {
        run.start_epoch(epoch)?;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[epoch as u64])));
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = node_class_loss_and_grad(setup, &run.sample, &run.params, batch)?;
            run.step(epoch, b, loss, &grads)?;
            sum += loss * batch.len() as f64;
        }
        run.end_epoch(epoch, sum / order.len() as f64);
    }
    Ok(run.finish())
}

pub fn train_link_predictor(
    setup: &TrainSetup,
    cfg: &TrainConfig,
    params: EncoderParams,
    positives: &[(usize, usize)],
) -> Result<TrainResult> {
    cfg.validate()?;
    if positives.is_empty() {
        return Err(TrainError::NoEdges);
    }
    let mut run = Run::new(setup, cfg, params)?;
    let mut order = positives.to_vec();
    for epoch in 0..cfg.epochs {
        run.start_epoch(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[epoch as u64, 0x11AC]));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let negs: Vec<Vec<usize>> =
                batch.iter().map(|&(u, v)| draw_negatives(setup.g, u, v, cfg.neg_samples, &mut rng)).collect();
            if negs.iter().any(|n| n.is_empty()) {
                return Err(TrainError::Config("graph too small to draw negatives".into()));
            }
            let (loss, grads) = link_loss_and_grad(setup, &run.sample, &run.params, batch, &negs, cfg.normalize_embeddings)?;
            run.step(epoch, b, loss, &grads)?;
            sum += loss * batch.len() as f64;
        }
        run.end_epoch(epoch, sum / order.len() as f64);
    }
    Ok(run.finish())
}

struct Run<'a> {
    setup: &'a TrainSetup<'a>,
    cfg: &'a TrainConfig,
    params: EncoderParams,
    adam: AdamState,
    sample: SampledGraph,
    history: Vec<f64>,
}

impl<'a> Run<'a> {
    fn new(setup: &'a TrainSetup<'a>, cfg: &'a TrainConfig, params: EncoderParams) -> Result<Self> {
        let sample = setup.sample(0, cfg.resample_per_epoch)?;
        Ok(Run { setup, cfg, adam: AdamState::new(&params), params, sample, history: Vec::with_capacity(cfg.epochs) })
    }

    fn start_epoch(&mut self, epoch: usize) -> Result<()> {
        if epoch > 0 && self.cfg.resample_per_epoch {
            self.sample = self.setup.sample(epoch, true)?;
        }
        Ok(())
    }

    fn step(&mut self, epoch: usize, batch: usize, loss: f64, grads: &EncoderParams) -> Result<()> {
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Divergence { epoch, batch, loss });
        }
        adam_step(&mut self.params, grads, &mut self.adam, self.cfg);
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize, mean: f64) {
        log::debug!("epoch {epoch}: loss {mean:.6}");
        self.history.push(mean);
    }

    fn finish(self) -> TrainResult {
        TrainResult { params: self.params, adam: self.adam, loss_history: self.history }
    }
}

/// `epoch,loss` CSV, epochs numbered from 1.
pub fn write_loss_csv(history: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{:?}\n", i + 1, l));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parameters followed by the Adam moments and step counter.
pub fn write_checkpoint<W: Write>(params: &EncoderParams, adam: &AdamState, mut w: W) -> Result<()> {
    params.write_to(&mut w)?;
    adam.m.write_to(&mut w)?;
    adam.v.write_to(&mut w)?;
    w.write_all(&adam.t.to_le_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(EncoderParams, AdamState)> {
    let params = EncoderParams::read_from(&mut r)?;
    let m = EncoderParams::read_from(&mut r)?;
    let v = EncoderParams::read_from(&mut r)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    if m.dims != params.dims || v.dims != params.dims {
        return Err(TrainError::Config("checkpoint moments do not match parameters".into()));
    }
    Ok((params, AdamState { m, v, t: u64::from_le_bytes(b8) }))
}
