//! Two-hop neighborhood aggregation.
//!
//! Plain mode:
//!
//! ```text
//! z1_u = act(W2 . [p_u ; mean p over u's sampled neighbors])
//! z_v  = out(W1 . [z1_v ; mean z1 over v's sampled neighbors])
//! ```
//!
//! Edge-aware mode keeps one matrix per edge cluster and concatenates the
//! transformed blocks instead of the inputs:
//!
//! ```text
//! z1_u = act([W2_0 p_u ; W2_1 E_1[p] ; ... ; W2_k E_k[p]])
//! z_v  = out([W1_0 z1_v ; W1_1 E_1[z1] ; ... ; W1_k E_k[z1]])
//! ```
//!
//! where `E_i` averages over the sampled slots reached through a cluster-`i`
//! edge (zero when there are none). An optional affine head maps `z_v` to the
//! final output width.
//!
//! Batches are processed in fixed-size chunks; chunk gradients are reduced
//! in chunk order so results do not depend on the number of threads.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::EdgeClusterAssignment;
use crate::graph::{EdgeRef, PropertyGraph};
use crate::sampler::SampledGraph;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("edge cluster count mismatch: parameters expect {expected}, assignment has {got}")]
    EdgeClusters { expected: usize, got: usize },
    #[error("edge-aware encoding needs an edge cluster assignment")]
    MissingEdgeClusters,
    #[error("node {0} is out of range")]
    NodeOutOfRange(usize),
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Plain,
    EdgeAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(pre > 0.0)),
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            _ => Err(EncoderError::Format(format!("unknown activation tag {t}"))),
        }
    }
}

/// Layer widths. `hidden` is the width of `z1`, `layer1` the width of the
/// aggregated `z_v` before the optional output head, `output` the final width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub layer1: usize,
    pub output: usize,
}

impl EncoderDims {
    pub const DEFAULT_HIDDEN: usize = 128;

    /// Widths for a mode. Edge-aware blocks get `ceil(hidden / (k_e + 1))`
    /// columns each, so `hidden` is rounded up to a multiple of `k_e + 1`.
    /// Without an output head `layer1 == output`.
    pub fn for_mode(mode: EncoderMode, input: usize, hidden: usize, output: usize, k_e: usize, out_proj: bool) -> Self {
        match mode {
            EncoderMode::Plain => EncoderDims { input, hidden, layer1: if out_proj { hidden } else { output }, output },
            EncoderMode::EdgeAware => {
                let blocks = k_e + 1;
                let block = hidden.div_ceil(blocks);
                let layer1 = if out_proj { block * blocks } else { output };
                EncoderDims { input, hidden: block * blocks, layer1, output }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Trainable weights. Matrices map column vectors (`y = W x`).
///
/// Plain: `w2 = [W2]` (hidden x 2 input), `w1 = [W1]` (layer1 x 2 hidden).
/// Edge-aware: `w2[i]` is `hidden/(k_e+1) x input`, `w1[i]` is
/// `layer1/(k_e+1) x hidden`, index 0 being the self block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub mode: EncoderMode,
    pub k_e: usize,
    pub w1: Vec<Array2<f64>>,
    pub w2: Vec<Array2<f64>>,
    pub out_proj: Option<OutputHead>,
    pub dims: EncoderDims,
    /// Applied to `z1`.
    pub activation: Activation,
    /// Applied to the aggregated `z_v` (before the output head, if any).
    pub output_activation: Activation,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
}

/// Glorot-uniform initialization; head bias starts at zero.
pub fn init_params(dims: EncoderDims, mode: EncoderMode, k_e: usize, out_proj: bool, seed: u64) -> Result<EncoderParams> {
    let shapes = Shapes::new(mode, k_e, dims, out_proj)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = shapes.w1.iter().map(|&(r, c)| glorot(r, c, &mut rng)).collect();
    let w2 = shapes.w2.iter().map(|&(r, c)| glorot(r, c, &mut rng)).collect();
    let out_proj = shapes.head.map(|(r, c)| OutputHead { weight: glorot(r, c, &mut rng), bias: Array1::zeros(r) });
    Ok(EncoderParams {
        mode,
        k_e: if mode == EncoderMode::Plain { 0 } else { k_e },
        w1,
        w2,
        out_proj,
        dims,
        activation: Activation::Relu,
        output_activation: if shapes.head.is_some() { Activation::Relu } else { Activation::Identity },
    })
}

struct Shapes {
    w1: Vec<(usize, usize)>,
    w2: Vec<(usize, usize)>,
    head: Option<(usize, usize)>,
}

impl Shapes {
    fn new(mode: EncoderMode, k_e: usize, d: EncoderDims, out_proj: bool) -> Result<Self> {
        if d.input == 0 || d.hidden == 0 || d.layer1 == 0 || d.output == 0 {
            return Err(EncoderError::Dimension(format!("all widths must be positive: {d:?}")));
        }
        if !out_proj && d.layer1 != d.output {
            return Err(EncoderError::Dimension(format!("without an output head layer1 ({}) must equal output ({})", d.layer1, d.output)));
        }
        let head = out_proj.then_some((d.output, d.layer1));
        match mode {
            EncoderMode::Plain => Ok(Shapes { w1: vec![(d.layer1, 2 * d.hidden)], w2: vec![(d.hidden, 2 * d.input)], head }),
            EncoderMode::EdgeAware => {
                if k_e == 0 {
                    return Err(EncoderError::Dimension("edge-aware mode needs k_e >= 1".into()));
                }
                let blocks = k_e + 1;
                if d.hidden % blocks != 0 || d.layer1 % blocks != 0 {
                    return Err(EncoderError::Dimension(format!(
                        "hidden ({}) and layer1 ({}) must be multiples of k_e + 1 = {blocks}",
                        d.hidden, d.layer1
                    )));
                }
                Ok(Shapes {
                    w1: vec![(d.layer1 / blocks, d.hidden); blocks],
                    w2: vec![(d.hidden / blocks, d.input); blocks],
                    head,
                })
            }
        }
    }
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            w1: self.w1.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            w2: self.w2.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            out_proj: self
                .out_proj
                .as_ref()
                .map(|h| OutputHead { weight: Array2::zeros(h.weight.raw_dim()), bias: Array1::zeros(h.bias.len()) }),
            ..self.clone()
        }
    }

    /// Parameter tensors as flat slices, in serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for w in self.w1.iter().chain(&self.w2) {
            out.push(w.as_slice().expect("standard layout"));
        }
        if let Some(h) = &self.out_proj {
            out.push(h.weight.as_slice().expect("standard layout"));
            out.push(h.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for w in self.w1.iter_mut().chain(self.w2.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
        }
        if let Some(h) = &mut self.out_proj {
            out.push(h.weight.as_slice_mut().expect("standard layout"));
            out.push(h.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn check_shapes(&self) -> Result<()> {
        let shapes = Shapes::new(self.mode, self.k_e, self.dims, self.out_proj.is_some())?;
        let ok = self.w1.iter().map(|w| w.dim()).eq(shapes.w1.iter().copied())
            && self.w2.iter().map(|w| w.dim()).eq(shapes.w2.iter().copied())
            && self.out_proj.as_ref().map(|h| (h.weight.dim(), h.bias.len()))
                == shapes.head.map(|(r, c)| ((r, c), r));
        if ok {
            Ok(())
        } else {
            Err(EncoderError::Dimension("parameter shapes disagree with declared dims".into()))
        }
    }

    const MAGIC: &'static [u8; 8] = b"PGEPARAM";

    /// Binary container: magic, version, mode/activation tags, `k_e` and the
    /// four widths, then every tensor row-major as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        let mode = match self.mode {
            EncoderMode::Plain => 0u8,
            EncoderMode::EdgeAware => 1,
        };
        w.write_all(&[mode, self.activation.tag(), self.output_activation.tag(), u8::from(self.out_proj.is_some())])?;
        for x in [self.k_e, self.dims.input, self.dims.hidden, self.dims.layer1, self.dims.output] {
            w.write_all(&(x as u64).to_le_bytes())?;
        }
        for t in self.tensors() {
            for x in t {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(EncoderError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(EncoderError::Format("unsupported version".into()));
        }
        r.read_exact(&mut b4)?;
        let mode = match b4[0] {
            0 => EncoderMode::Plain,
            1 => EncoderMode::EdgeAware,
            t => return Err(EncoderError::Format(format!("unknown mode tag {t}"))),
        };
        let activation = Activation::from_tag(b4[1])?;
        let output_activation = Activation::from_tag(b4[2])?;
        let has_head = b4[3] != 0;
        let mut b8 = [0u8; 8];
        let mut next = || -> Result<usize> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8) as usize)
        };
        let k_e = next()?;
        let dims = EncoderDims { input: next()?, hidden: next()?, layer1: next()?, output: next()? };
        let mut params = init_params(dims, mode, k_e.max(usize::from(mode == EncoderMode::EdgeAware)), has_head, 0)?;
        params.k_e = k_e;
        params.activation = activation;
        params.output_activation = output_activation;
        for t in params.tensors_mut() {
            for x in t.iter_mut() {
                r.read_exact(&mut b8)?;
                *x = f64::from_le_bytes(b8);
            }
        }
        Ok(params)
    }
}

/// Nodes per parallel work unit.
const CHUNK: usize = 32;

struct Chunk {
    nodes: Vec<usize>,
    /// Layer-2 inputs: plain `[X2]`, edge-aware `[M_0, M_1, ..]`.
    l2_inputs: Vec<Array2<f64>>,
    a2: Array2<f64>,
    z1: Array2<f64>,
    /// Layer-1 inputs: plain `[X1]`, edge-aware `[S_0, S_1, ..]`.
    l1_inputs: Vec<Array2<f64>>,
    /// Edge-aware: cluster block (1-based, 0 = none) of each hop-1 slot.
    hop1_block: Vec<usize>,
    /// Edge-aware: matching slot count per (node, block).
    hop1_counts: Array2<f64>,
    a1: Array2<f64>,
    h: Array2<f64>,
}

/// Forward pass over a batch with everything needed for backprop.
pub struct BatchForward {
    chunks: Vec<Chunk>,
    pub output: Array2<f64>,
}

struct Ctx<'a> {
    g: &'a PropertyGraph,
    s: &'a SampledGraph,
    ec: Option<&'a EdgeClusterAssignment>,
    params: &'a EncoderParams,
}

impl Ctx<'_> {
    #[inline]
    fn block_of(&self, e: Option<EdgeRef>) -> usize {
        match (e, self.ec) {
            (Some(e), Some(ec)) => ec.cluster_of(e) + 1,
            _ => 0,
        }
    }
}

fn validate(g: &PropertyGraph, s: &SampledGraph, ec: Option<&EdgeClusterAssignment>, params: &EncoderParams, batch: &[usize]) -> Result<()> {
    params.check_shapes()?;
    if g.prop_dim() != params.dims.input {
        return Err(EncoderError::Dimension(format!("graph properties have width {}, parameters expect {}", g.prop_dim(), params.dims.input)));
    }
    if s.n_nodes() != g.n_nodes() {
        return Err(EncoderError::Dimension(format!("sample covers {} nodes, graph has {}", s.n_nodes(), g.n_nodes())));
    }
    if let Some(&v) = batch.iter().find(|&&v| v >= g.n_nodes()) {
        return Err(EncoderError::NodeOutOfRange(v));
    }
    if params.mode == EncoderMode::EdgeAware {
        let ec = ec.ok_or(EncoderError::MissingEdgeClusters)?;
        if ec.k_e != params.k_e {
            return Err(EncoderError::EdgeClusters { expected: params.k_e, got: ec.k_e });
        }
        if ec.n_edges() != g.n_edges() {
            return Err(EncoderError::Dimension(format!("edge clusters cover {} slots, graph has {}", ec.n_edges(), g.n_edges())));
        }
    }
    Ok(())
}

/// Runs the encoder on `batch` and keeps the intermediate values.
pub fn forward(
    g: &PropertyGraph,
    s: &SampledGraph,
    ec: Option<&EdgeClusterAssignment>,
    params: &EncoderParams,
    batch: &[usize],
) -> Result<BatchForward> {
    validate(g, s, ec, params, batch)?;
    let ctx = Ctx { g, s, ec, params };
    let chunks: Vec<Chunk> = batch.par_chunks(CHUNK).map(|nodes| forward_chunk(&ctx, nodes)).collect();
    let out_dim = params.dims.output;
    let mut output = Array2::zeros((batch.len(), out_dim));
    let mut at = 0;
    for c in &chunks {
        let y = chunk_output(params, c);
        output.slice_mut(s![at..at + y.nrows(), ..]).assign(&y);
        at += y.nrows();
    }
    Ok(BatchForward { chunks, output })
}

fn chunk_output(params: &EncoderParams, c: &Chunk) -> Array2<f64> {
    match &params.out_proj {
        Some(head) => c.h.dot(&head.weight.t()) + &head.bias,
        None => c.h.clone(),
    }
}

/// Embeddings (rows in batch order) without keeping backprop state.
pub fn encode(
    g: &PropertyGraph,
    s: &SampledGraph,
    ec: Option<&EdgeClusterAssignment>,
    params: &EncoderParams,
    batch: &[usize],
) -> Result<Array2<f64>> {
    Ok(forward(g, s, ec, params, batch)?.output)
}

pub fn encode_plain(g: &PropertyGraph, s: &SampledGraph, params: &EncoderParams, batch: &[usize]) -> Result<Array2<f64>> {
    if params.mode != EncoderMode::Plain {
        return Err(EncoderError::Dimension("encode_plain needs plain-mode parameters".into()));
    }
    encode(g, s, None, params, batch)
}

pub fn encode_edge_aware(
    g: &PropertyGraph,
    s: &SampledGraph,
    ec: &EdgeClusterAssignment,
    params: &EncoderParams,
    batch: &[usize],
) -> Result<Array2<f64>> {
    if params.mode != EncoderMode::EdgeAware {
        return Err(EncoderError::Dimension("encode_edge_aware needs edge-aware parameters".into()));
    }
    encode(g, s, Some(ec), params, batch)
}

fn forward_chunk(ctx: &Ctx, nodes: &[usize]) -> Chunk {
    let params = ctx.params;
    let (g, smp) = (ctx.g, ctx.s);
    let ss = smp.sample_size();
    let per = 1 + ss;
    let rows = nodes.len() * per;
    let d = params.dims.input;
    let props = g.node_props();

    // (row node, hop-2 node list, hop-2 edge lookup) for each layer-2 row
    let row_node = |b: usize, r: usize| -> usize {
        let v = nodes[b];
        if r == 0 { v } else { smp.hop1(v)[r - 1] as usize }
    };
    let row_sources = |b: usize, r: usize| -> (&[u32], Box<dyn Fn(usize) -> Option<EdgeRef> + '_>) {
        let v = nodes[b];
        if r == 0 {
            (smp.hop1(v), Box::new(move |t| smp.hop1_edge(v, t)))
        } else {
            (smp.hop2(v, r - 1), Box::new(move |t| smp.hop2_edge(v, r - 1, t)))
        }
    };

    let hop1_block: Vec<usize> = nodes
        .iter()
        .flat_map(|&v| (0..ss).map(move |j| ctx.block_of(smp.hop1_edge(v, j))))
        .collect();

    match params.mode {
        EncoderMode::Plain => {
            let mut x2 = Array2::zeros((rows, 2 * d));
            for b in 0..nodes.len() {
                for r in 0..per {
                    let row = b * per + r;
                    x2.slice_mut(s![row, ..d]).assign(&props.row(row_node(b, r)));
                    let (src, _) = row_sources(b, r);
                    let mut mean = x2.slice_mut(s![row, d..]);
                    for &u in src {
                        mean += &props.row(u as usize);
                    }
                    mean /= src.len() as f64;
                }
            }
            let a2 = x2.dot(&params.w2[0].t());
            let z1 = a2.mapv(|x| params.activation.apply(x));
            let h_dim = params.dims.hidden;
            let mut x1 = Array2::zeros((nodes.len(), 2 * h_dim));
            for b in 0..nodes.len() {
                x1.slice_mut(s![b, ..h_dim]).assign(&z1.row(b * per));
                let mut mean = x1.slice_mut(s![b, h_dim..]);
                for j in 0..ss {
                    mean += &z1.row(b * per + 1 + j);
                }
                mean /= ss as f64;
            }
            let a1 = x1.dot(&params.w1[0].t());
            let h = a1.mapv(|x| params.output_activation.apply(x));
            Chunk {
                nodes: nodes.to_vec(),
                l2_inputs: vec![x2],
                a2,
                z1,
                l1_inputs: vec![x1],
                hop1_block,
                hop1_counts: Array2::zeros((0, 0)),
                a1,
                h,
            }
        }
        EncoderMode::EdgeAware => {
            let blocks = params.k_e + 1;
            let mut m: Vec<Array2<f64>> = (0..blocks).map(|_| Array2::zeros((rows, d))).collect();
            for b in 0..nodes.len() {
                for r in 0..per {
                    let row = b * per + r;
                    m[0].row_mut(row).assign(&props.row(row_node(b, r)));
                    let (src, edge_of) = row_sources(b, r);
                    let mut counts = vec![0usize; blocks];
                    for (t, &u) in src.iter().enumerate() {
                        let blk = ctx.block_of(edge_of(t));
                        if blk > 0 {
                            let mut acc = m[blk].row_mut(row);
                            acc += &props.row(u as usize);
                            counts[blk] += 1;
                        }
                    }
                    for blk in 1..blocks {
                        if counts[blk] > 0 {
                            let mut acc = m[blk].row_mut(row);
                            acc /= counts[blk] as f64;
                        }
                    }
                }
            }
            let b2 = params.dims.hidden / blocks;
            let mut a2 = Array2::zeros((rows, params.dims.hidden));
            for (i, mi) in m.iter().enumerate() {
                a2.slice_mut(s![.., i * b2..(i + 1) * b2]).assign(&mi.dot(&params.w2[i].t()));
            }
            let z1 = a2.mapv(|x| params.activation.apply(x));

            let h_dim = params.dims.hidden;
            let mut s_in: Vec<Array2<f64>> = (0..blocks).map(|_| Array2::zeros((nodes.len(), h_dim))).collect();
            let mut hop1_counts = Array2::zeros((nodes.len(), blocks));
            for b in 0..nodes.len() {
                s_in[0].row_mut(b).assign(&z1.row(b * per));
                for j in 0..ss {
                    let blk = hop1_block[b * ss + j];
                    if blk > 0 {
                        let mut acc = s_in[blk].row_mut(b);
                        acc += &z1.row(b * per + 1 + j);
                        hop1_counts[[b, blk]] += 1.0;
                    }
                }
                for blk in 1..blocks {
                    let c = hop1_counts[[b, blk]];
                    if c > 0.0 {
                        let mut acc = s_in[blk].row_mut(b);
                        acc /= c;
                    }
                }
            }
            let b1 = params.dims.layer1 / blocks;
            let mut a1 = Array2::zeros((nodes.len(), params.dims.layer1));
            for (i, si) in s_in.iter().enumerate() {
                a1.slice_mut(s![.., i * b1..(i + 1) * b1]).assign(&si.dot(&params.w1[i].t()));
            }
            let h = a1.mapv(|x| params.output_activation.apply(x));
            Chunk { nodes: nodes.to_vec(), l2_inputs: m, a2, z1, l1_inputs: s_in, hop1_block, hop1_counts, a1, h }
        }
    }
}

impl BatchForward {
    /// Parameter gradients for an upstream gradient on `output`.
    pub fn backward(&self, params: &EncoderParams, d_output: ArrayView2<f64>) -> Result<EncoderParams> {
        if d_output.dim() != self.output.dim() {
            return Err(EncoderError::Dimension(format!(
                "output gradient is {:?}, output is {:?}",
                d_output.dim(),
                self.output.dim()
            )));
        }
        let mut offsets = Vec::with_capacity(self.chunks.len());
        let mut at = 0;
        for c in &self.chunks {
            offsets.push(at);
            at += c.nodes.len();
        }
        let parts: Vec<EncoderParams> = self
            .chunks
            .par_iter()
            .zip(offsets)
            .map(|(c, at)| backward_chunk(params, c, d_output.slice(s![at..at + c.nodes.len(), ..])))
            .collect();
        let mut total = params.zeros_like();
        for p in &parts {
            total.add_assign(p);
        }
        Ok(total)
    }
}

fn backward_chunk(params: &EncoderParams, c: &Chunk, d_y: ArrayView2<f64>) -> EncoderParams {
    let mut grads = params.zeros_like();
    let n = c.nodes.len();
    let per = c.z1.nrows() / n.max(1);
    let ss = per - 1;

    let d_h = match (&params.out_proj, &mut grads.out_proj) {
        (Some(head), Some(g_head)) => {
            g_head.weight = d_y.t().dot(&c.h);
            g_head.bias = d_y.sum_axis(Axis(0));
            d_y.dot(&head.weight)
        }
        _ => d_y.to_owned(),
    };
    let mut d_a1 = d_h;
    d_a1.zip_mut_with(&c.a1, |g, &a| *g *= params.output_activation.grad(a));

    let h_dim = params.dims.hidden;
    let mut d_z1 = Array2::<f64>::zeros(c.z1.raw_dim());
    match params.mode {
        EncoderMode::Plain => {
            grads.w1[0] = d_a1.t().dot(&c.l1_inputs[0]);
            let d_x1 = d_a1.dot(&params.w1[0]);
            for b in 0..n {
                let mut self_row = d_z1.row_mut(b * per);
                self_row += &d_x1.slice(s![b, ..h_dim]);
                let shared = d_x1.slice(s![b, h_dim..]).mapv(|x| x / ss as f64);
                for j in 0..ss {
                    let mut row = d_z1.row_mut(b * per + 1 + j);
                    row += &shared;
                }
            }
        }
        EncoderMode::EdgeAware => {
            let blocks = params.k_e + 1;
            let b1 = params.dims.layer1 / blocks;
            let mut d_s = Vec::with_capacity(blocks);
            for i in 0..blocks {
                let d_block = d_a1.slice(s![.., i * b1..(i + 1) * b1]);
                grads.w1[i] = d_block.t().dot(&c.l1_inputs[i]);
                d_s.push(d_block.dot(&params.w1[i]));
            }
            for b in 0..n {
                let mut self_row = d_z1.row_mut(b * per);
                self_row += &d_s[0].row(b);
                for j in 0..ss {
                    let blk = c.hop1_block[b * ss + j];
                    if blk > 0 {
                        let scale = 1.0 / c.hop1_counts[[b, blk]];
                        let mut row = d_z1.row_mut(b * per + 1 + j);
                        row.scaled_add(scale, &d_s[blk].row(b));
                    }
                }
            }
        }
    }

    let mut d_a2 = d_z1;
    d_a2.zip_mut_with(&c.a2, |g, &a| *g *= params.activation.grad(a));
    match params.mode {
        EncoderMode::Plain => {
            grads.w2[0] = d_a2.t().dot(&c.l2_inputs[0]);
        }
        EncoderMode::EdgeAware => {
            let blocks = params.k_e + 1;
            let b2 = params.dims.hidden / blocks;
            for i in 0..blocks {
                grads.w2[i] = d_a2.slice(s![.., i * b2..(i + 1) * b2]).t().dot(&c.l2_inputs[i]);
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphParts;
    use ndarray::array;

    fn path_graph() -> PropertyGraph {
        PropertyGraph::build(GraphParts {
            node_props: array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]],
            edges: vec![(0, 1), (1, 2)],
            ..Default::default()
        })
        .unwrap()
    }

    fn repeat_sample(n: usize, s: usize, hop1: &[usize], hop2: &[usize]) -> SampledGraph {
        // every node v samples hop1[v] s times; each occurrence of u samples hop2[u]
        let h1: Vec<Vec<(usize, Option<EdgeRef>)>> = (0..n).map(|v| vec![(hop1[v], None); s]).collect();
        let h2: Vec<Vec<Vec<(usize, Option<EdgeRef>)>>> =
            (0..n).map(|v| vec![vec![(hop2[hop1[v]], None); s]; s]).collect();
        SampledGraph::from_rows(&h1, &h2)
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let g = path_graph();
        let dims = EncoderDims::for_mode(EncoderMode::Plain, 2, 4, 3, 0, false);
        let mut p = init_params(dims, EncoderMode::Plain, 0, false, 1).unwrap();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        let smp = repeat_sample(3, 2, &[1, 0, 1], &[1, 2, 1]);
        let z = encode_plain(&g, &smp, &p, &[0, 1, 2]).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_weights_on_path_match_hand_evaluation() {
        // 3-node path 0-1-2; every hop samples node 1's view: v -> 1, 1 -> 2
        let g = path_graph();
        let dims = EncoderDims { input: 2, hidden: 4, layer1: 8, output: 8 };
        let mut p = init_params(dims, EncoderMode::Plain, 0, false, 0).unwrap();
        p.activation = Activation::Identity;
        p.w2[0] = Array2::eye(4);
        p.w1[0] = Array2::eye(8);
        let smp = repeat_sample(3, 3, &[1, 2, 1], &[1, 2, 1]);
        let z = encode_plain(&g, &smp, &p, &[0]).unwrap();
        // z1_0 = [p0 ; p1] = [1,0,0,2]; hop-1 node 1 samples node 2: z1_1 = [p1 ; p2] = [0,2,3,1]
        let expect = [1.0, 0.0, 0.0, 2.0, 0.0, 2.0, 3.0, 1.0];
        for (a, b) in z.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{z:?}");
        }
    }

    #[test]
    fn init_bounds_determinism_and_mean() {
        let dims = EncoderDims { input: 512, hidden: 256, layer1: 8, output: 8 };
        let a = init_params(dims, EncoderMode::Plain, 0, false, 5).unwrap();
        let b = init_params(dims, EncoderMode::Plain, 0, false, 5).unwrap();
        assert_eq!(a, b);
        let w2 = &a.w2[0];
        assert_eq!(w2.dim(), (256, 1024));
        let limit = (6.0f64 / (256.0 + 1024.0)).sqrt();
        assert!(w2.iter().all(|x| x.abs() <= limit));
        let dims = EncoderDims { input: 256, hidden: 512, layer1: 8, output: 8 };
        let c = init_params(dims, EncoderMode::Plain, 0, false, 6).unwrap();
        let mean = c.w2[0].mean().unwrap();
        assert!(mean.abs() < 0.01);
        assert_eq!(c.w2[0].dim(), (512, 512));
        let h = init_params(EncoderDims::for_mode(EncoderMode::EdgeAware, 3, 128, 5, 2, true), EncoderMode::EdgeAware, 2, true, 0)
            .unwrap();
        assert!(h.out_proj.as_ref().unwrap().bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn edge_aware_widths() {
        let d = EncoderDims::for_mode(EncoderMode::EdgeAware, 10, 128, 3, 2, true);
        assert_eq!(d, EncoderDims { input: 10, hidden: 129, layer1: 129, output: 3 });
        let p = init_params(d, EncoderMode::EdgeAware, 2, true, 0).unwrap();
        assert_eq!(p.w2.len(), 3);
        assert_eq!(p.w2[0].dim(), (43, 10));
        assert_eq!(p.w1[1].dim(), (43, 129));
        assert_eq!(p.out_proj.as_ref().unwrap().weight.dim(), (3, 129));
    }

    #[test]
    fn serialization_round_trip() {
        let d = EncoderDims::for_mode(EncoderMode::EdgeAware, 4, 6, 3, 2, true);
        let p = init_params(d, EncoderMode::EdgeAware, 2, true, 9).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 5 * 8 + 8 * p.n_params());
        let q = EncoderParams::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert!(matches!(EncoderParams::read_from(&b"NOTPARAMS......."[..]), Err(EncoderError::Format(_))));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = path_graph();
        let p = init_params(EncoderDims::for_mode(EncoderMode::Plain, 3, 4, 2, 0, false), EncoderMode::Plain, 0, false, 0).unwrap();
        let smp = repeat_sample(3, 2, &[1, 0, 1], &[1, 2, 1]);
        assert!(matches!(encode_plain(&g, &smp, &p, &[0]), Err(EncoderError::Dimension(_))));
        let pe = init_params(EncoderDims::for_mode(EncoderMode::EdgeAware, 2, 4, 2, 1, true), EncoderMode::EdgeAware, 1, true, 0)
            .unwrap();
        let ec = EdgeClusterAssignment { assignment: vec![0, 1, 0, 1], in_assignment: None, k_e: 2, direction_split: false };
        assert!(matches!(encode_edge_aware(&g, &smp, &ec, &pe, &[0]), Err(EncoderError::EdgeClusters { .. })));
    }
}
