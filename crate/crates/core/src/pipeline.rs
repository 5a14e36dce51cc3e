//! Stage runner: cluster, sample, train and evaluate from one [`RunConfig`],
//! writing every artifact into the output directory alongside a
//! `manifest.jsonl` of checksums.
//!
//! Artifacts:
//!
//! ```text
//! config.txt      canonical config
//! clusters.tsv    <node_id>\t<cluster>
//! sample.tsv      <node_id>\t<hop>\t<slot>\t<sampled_id>
//! params.bin      trained encoder parameters
//! loss.csv        epoch,loss
//! embeddings.tsv  <node_id>\t<v_1>\t...\t<v_d>
//! metrics.jsonl   one JSON object per evaluation
//! sweep.csv       k,b_d,seed,f1_micro,f1_macro
//! analysis.json   similarity gap and strategy expectations
//! manifest.jsonl  {stage, config_hash, seed, output_path, checksum, complete}
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    bias_sweep, expected_step_similarity, printed_form_report, strategy_biased, strategy_unbiased, within_cluster_gap, write_sweep_csv,
    AnalysisError, PrintedFormReport, SimilarityModel, SweepConfig,
};
use crate::clustering::{cluster_nodes, ClusterAssignment, ClusterError};
use crate::config::{ConfigError, RunConfig};
use crate::encoder::{EncoderError, EncoderMode, EncoderParams};
use crate::eval::{EvalError, Metrics};
use crate::experiment::{
    evaluate_link_prediction, evaluate_node_classification, link_data, train_link_prediction, train_node_classification, ExperimentError,
};
use crate::graph::{load_graph, split_nodes, write_cluster_map, write_graph, GraphError, PropertyGraph};
use crate::sampler::{sample_neighborhood, SampleError};
use crate::synthetic::{generate_synthetic, SyntheticError};
use crate::trainer::{write_loss_csv, Task, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Numeric,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

trait Classify: std::fmt::Display {
    fn kind(&self) -> FailureKind;

    fn at(&self, stage: &'static str) -> PipelineError {
        PipelineError { stage, kind: self.kind(), message: self.to_string() }
    }
}

impl Classify for ConfigError {
    fn kind(&self) -> FailureKind {
        FailureKind::Config
    }
}

impl Classify for GraphError {
    fn kind(&self) -> FailureKind {
        match self {
            GraphError::BadRatios(_) => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for ClusterError {
    fn kind(&self) -> FailureKind {
        match self {
            ClusterError::ZeroK | ClusterError::TooManyClusters { .. } | ClusterError::Param(_) | ClusterError::TooManyEdgeClusters(_) => {
                FailureKind::Config
            }
            _ => FailureKind::Data,
        }
    }
}

impl Classify for SampleError {
    fn kind(&self) -> FailureKind {
        match self {
            SampleError::Config(_) | SampleError::NonPositive(_) => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for EncoderError {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for TrainError {
    fn kind(&self) -> FailureKind {
        match self {
            TrainError::Config(_) => FailureKind::Config,
            TrainError::NonFinite(_) | TrainError::Divergence { .. } => FailureKind::Numeric,
            TrainError::Sample(e) => e.kind(),
            _ => FailureKind::Data,
        }
    }
}

impl Classify for EvalError {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for ExperimentError {
    fn kind(&self) -> FailureKind {
        match self {
            ExperimentError::Graph(e) => e.kind(),
            ExperimentError::Cluster(e) => e.kind(),
            ExperimentError::Sample(e) => e.kind(),
            ExperimentError::Encoder(e) => e.kind(),
            ExperimentError::Train(e) => e.kind(),
            ExperimentError::Eval(e) => e.kind(),
            ExperimentError::Invalid(_) => FailureKind::Config,
        }
    }
}

impl Classify for SyntheticError {
    fn kind(&self) -> FailureKind {
        match self {
            SyntheticError::Spec(_) => FailureKind::Config,
            SyntheticError::Graph(e) => e.kind(),
        }
    }
}

impl Classify for AnalysisError {
    fn kind(&self) -> FailureKind {
        match self {
            AnalysisError::Cluster(e) => e.kind(),
            AnalysisError::Experiment(e) => e.kind(),
            AnalysisError::Invalid(_) | AnalysisError::EmptyGrid => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for std::io::Error {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

fn io_at(stage: &'static str, path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError { stage, kind: FailureKind::Data, message: format!("{}: {e}", path.display()) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub output_path: String,
    pub checksum: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn read_manifest(path: &Path) -> std::io::Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

/// The JSON line written to `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: Task,
    pub mode: EncoderMode,
    pub config_hash: String,
    pub seed: u64,
    pub b_s: f64,
    pub b_d: f64,
    pub epochs: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasAnalysis {
    pub k: usize,
    pub alpha: f64,
    pub within_cluster_similarity: f64,
    pub global_similarity: f64,
    pub expected_step_unbiased: f64,
    pub expected_step_biased: f64,
    pub closed_form: PrintedFormReport,
}

/// What a file must look like after it is written.
enum Format {
    ClusterMap { rows: usize },
    Sample,
    Params,
    Loss { epochs: usize },
    Embeddings { rows: usize, dim: usize },
    JsonLines,
    Json,
    Csv { header: &'static str },
    Graph,
}

fn check_format(path: &Path, format: &Format) -> std::result::Result<(), String> {
    if let Format::Params = format {
        let f = fs::File::open(path).map_err(|e| e.to_string())?;
        return EncoderParams::read_from(std::io::BufReader::new(f)).map(|_| ()).map_err(|e| e.to_string());
    }
    if let Format::Graph = format {
        return if path.join("nodes.tsv").exists() && path.join("edges.tsv").exists() { Ok(()) } else { Err("missing nodes.tsv or edges.tsv".into()) };
    }
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    let all_reals = |fields: &[&str]| fields.iter().all(|f| f.parse::<f64>().is_ok_and(f64::is_finite));
    match *format {
        Format::ClusterMap { rows } => {
            if lines.len() != rows {
                return Err(format!("{} rows, expected {rows}", lines.len()));
            }
            for (i, l) in lines.iter().enumerate() {
                let f: Vec<&str> = l.split('\t').collect();
                if f.len() != 2 || f[1].parse::<usize>().is_err() {
                    return Err(format!("line {}: `{l}`", i + 1));
                }
            }
        }
        Format::Sample => {
            if let Some(i) = lines.iter().position(|l| l.split('\t').count() != 4) {
                return Err(format!("line {}: expected 4 fields", i + 1));
            }
        }
        Format::Loss { epochs } => {
            if lines.first() != Some(&"epoch,loss") || lines.len() != epochs + 1 {
                return Err("bad header or row count".into());
            }
            if let Some(i) = lines[1..].iter().position(|l| !l.split(',').nth(1).is_some_and(|x| all_reals(&[x]))) {
                return Err(format!("line {}: loss is not a finite real", i + 2));
            }
        }
        Format::Embeddings { rows, dim } => {
            if lines.len() != rows {
                return Err(format!("{} rows, expected {rows}", lines.len()));
            }
            for (i, l) in lines.iter().enumerate() {
                let f: Vec<&str> = l.split('\t').collect();
                if f.len() != dim + 1 || !all_reals(&f[1..]) {
                    return Err(format!("line {}: expected an id and {dim} finite reals", i + 1));
                }
            }
        }
        Format::JsonLines => {
            for (i, l) in lines.iter().enumerate() {
                serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(l).map_err(|e| format!("line {}: {e}", i + 1))?;
            }
        }
        Format::Json => {
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| e.to_string())?;
        }
        Format::Csv { header } => {
            if lines.first() != Some(&header) {
                return Err(format!("expected header `{header}`"));
            }
        }
        Format::Params | Format::Graph => unreachable!(),
    }
    Ok(())
}

fn write_embeddings(g: &PropertyGraph, emb: &Array2<f64>, path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, row) in g.node_ids().iter().zip(emb.rows()) {
        write!(w, "{id}")?;
        for x in row {
            write!(w, "\t{x:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

/// One invocation against an output directory. Stages load what they need
/// lazily; every artifact is validated, checksummed and recorded.
pub struct Session {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
    /// Records from earlier invocations on other stages.
    previous: Vec<ManifestRecord>,
    records: Vec<ManifestRecord>,
    graph: Option<PropertyGraph>,
    clusters: Option<ClusterAssignment>,
}

impl Session {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate().map_err(|e| e.at("config"))?;
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| io_at("config", &out, e))?;
        let manifest = out.join(MANIFEST);
        let previous = if manifest.exists() { read_manifest(&manifest).unwrap_or_default() } else { Vec::new() };
        let hash = cfg.hash();
        let mut s = Session { cfg, hash, out, previous, records: Vec::new(), graph: None, clusters: None };
        let path = s.out.join("config.txt");
        fs::write(&path, s.cfg.to_text()).map_err(|e| io_at("config", &path, e))?;
        s.record("config", &path, s.cfg.seed)?;
        Ok(s)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    fn record(&mut self, stage: &'static str, path: &Path, seed: u64) -> Result<()> {
        let checksum = sha256_file(path).map_err(|e| io_at(stage, path, e))?;
        self.records.push(ManifestRecord {
            stage: stage.into(),
            config_hash: self.hash.clone(),
            seed,
            output_path: path.display().to_string(),
            checksum,
            complete: true,
            error: None,
        });
        Ok(())
    }

    fn record_dir(&mut self, stage: &'static str, dir: &Path, seed: u64) -> Result<()> {
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_at(stage, dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            self.record(stage, &p, seed)?;
        }
        Ok(())
    }

    fn validated(&mut self, stage: &'static str, path: &Path, format: Format, seed: u64) -> Result<()> {
        check_format(path, &format).map_err(|msg| PipelineError {
            stage,
            kind: FailureKind::Data,
            message: format!("{} failed validation after write: {msg}", path.display()),
        })?;
        match format {
            Format::Graph => self.record_dir(stage, path, seed),
            _ => self.record(stage, path, seed),
        }
    }

    pub fn graph(&mut self) -> Result<&PropertyGraph> {
        if self.graph.is_none() {
            let g = match &self.cfg.files {
                Some(f) => load_graph(&f.nodes, &f.edges, f.labels.as_deref(), self.cfg.directed).map_err(|e| e.at("load"))?,
                None => generate_synthetic(&self.cfg.synthetic, self.cfg.component_seed("synthetic")).map_err(|e| e.at("load"))?,
            };
            log::info!("graph: {} nodes, {} edges, {} property dims", g.n_nodes(), g.n_edges(), g.prop_dim());
            self.graph = Some(g);
        }
        Ok(self.graph.as_ref().unwrap())
    }

    /// Writes the graph's node, edge and label files (synthetic graphs
    /// included) into `graph/`.
    pub fn write_graph(&mut self) -> Result<PathBuf> {
        let dir = self.out.join("graph");
        write_graph(self.graph()?, &dir).map_err(|e| e.at("generate"))?;
        self.validated("generate", &dir, Format::Graph, self.cfg.component_seed("synthetic"))?;
        Ok(dir)
    }

    pub fn clusters(&mut self) -> Result<&ClusterAssignment> {
        if self.clusters.is_none() {
            let seed = self.cfg.component_seed("clustering");
            let method = self.cfg.clustering();
            let path = self.out.join("clusters.tsv");
            let g = self.graph()?;
            let c = cluster_nodes(g, method, seed).map_err(|e| e.at("cluster"))?;
            log::info!("clustering: k = {}", c.k);
            write_cluster_map(g, &c.assignment, &path).map_err(|e| e.at("cluster"))?;
            let rows = g.n_nodes();
            self.clusters = Some(c);
            self.validated("cluster", &path, Format::ClusterMap { rows }, seed)?;
        }
        Ok(self.clusters.as_ref().unwrap())
    }

    fn ready(&mut self) -> Result<(&PropertyGraph, &ClusterAssignment)> {
        self.clusters()?;
        Ok((self.graph.as_ref().unwrap(), self.clusters.as_ref().unwrap()))
    }

    /// Writes the inference-time two-hop sample.
    pub fn sample(&mut self) -> Result<PathBuf> {
        let bias = self.cfg.bias();
        let path = self.out.join("sample.tsv");
        let (g, c) = self.ready()?;
        let s = sample_neighborhood(g, c, &bias).map_err(|e| e.at("sample"))?;
        s.write_tsv(g, &path).map_err(|e| e.at("sample"))?;
        self.validated("sample", &path, Format::Sample, bias.seed)?;
        Ok(path)
    }

    fn model_seed(&self) -> u64 {
        self.cfg.component_seed("model")
    }

    pub fn train(&mut self) -> Result<EncoderParams> {
        let (bias, train, model, seed) = (self.cfg.bias(), self.cfg.train(), self.cfg.model.clone(), self.model_seed());
        let (task, split_ratios, split_seed) = (self.cfg.task, self.cfg.split, self.cfg.component_seed("node-split"));
        let (g, c) = self.ready()?;
        let trained = match task {
            Task::NodeClass => {
                let split = split_nodes(g, split_ratios, split_seed).map_err(|e| e.at("train"))?;
                train_node_classification(g, c, &split, &bias, &train, &model, seed)
            }
            Task::LinkPred => {
                let data = link_data(g, seed).map_err(|e| e.at("train"))?;
                train_link_prediction(&data, c, &bias, &train, &model, seed)
            }
        }
        .map_err(|e| e.at("train"))?;
        let loss = self.out.join("loss.csv");
        write_loss_csv(&trained.loss_history, &loss).map_err(|e| e.at("train"))?;
        self.validated("train", &loss, Format::Loss { epochs: trained.loss_history.len() }, train.seed)?;
        let params_path = self.out.join("params.bin");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(fs::File::create(&params_path)?);
            trained.params.write_to(&mut w).map_err(std::io::Error::other)?;
            w.flush()
        };
        write().map_err(|e| io_at("train", &params_path, e))?;
        self.validated("train", &params_path, Format::Params, train.seed)?;
        Ok(trained.params)
    }

    pub fn load_params(&self, path: &Path) -> Result<EncoderParams> {
        let f = fs::File::open(path).map_err(|e| io_at("eval", path, e))?;
        EncoderParams::read_from(std::io::BufReader::new(f)).map_err(|e| e.at("eval"))
    }

    pub fn evaluate(&mut self, params: &EncoderParams) -> Result<MetricsRecord> {
        let (bias, train, model, seed) = (self.cfg.bias(), self.cfg.train(), self.cfg.model.clone(), self.model_seed());
        let (task, split_ratios, split_seed) = (self.cfg.task, self.cfg.split, self.cfg.component_seed("node-split"));
        let (emb_path, metrics_path) = (self.out.join("embeddings.tsv"), self.out.join("metrics.jsonl"));
        let (config_hash, global_seed) = (self.hash.clone(), self.cfg.seed);
        let (g, c) = self.ready()?;
        let (metrics, emb) = match task {
            Task::NodeClass => {
                let split = split_nodes(g, split_ratios, split_seed).map_err(|e| e.at("eval"))?;
                evaluate_node_classification(g, c, &split, &bias, &model, params, seed)
            }
            Task::LinkPred => {
                let data = link_data(g, seed).map_err(|e| e.at("eval"))?;
                evaluate_link_prediction(g, &data, c, &bias, &model, params, train.normalize_embeddings, seed)
            }
        }
        .map_err(|e| e.at("eval"))?;
        if emb.iter().any(|x| !x.is_finite()) {
            return Err(PipelineError { stage: "eval", kind: FailureKind::Numeric, message: "non-finite embedding".into() });
        }
        write_embeddings(g, &emb, &emb_path).map_err(|e| io_at("eval", &emb_path, e))?;
        let record = MetricsRecord {
            task,
            mode: params.mode,
            config_hash,
            seed: global_seed,
            b_s: bias.b_s,
            b_d: bias.b_d,
            epochs: train.epochs,
            metrics,
        };
        let line = serde_json::to_string(&record).expect("metrics serialize") + "\n";
        fs::write(&metrics_path, &line).map_err(|e| io_at("eval", &metrics_path, e))?;
        self.validated("eval", &emb_path, Format::Embeddings { rows: emb.nrows(), dim: emb.ncols() }, seed)?;
        self.validated("eval", &metrics_path, Format::JsonLines, seed)?;
        log::info!("metrics: {}", line.trim_end());
        Ok(record)
    }

    /// Similarity gap, strategy expectations and (when `sweep` is given) a
    /// bias/cluster-count sweep.
    pub fn analyze_bias(&mut self, alpha: f64, sweep: Option<SweepConfig>) -> Result<BiasAnalysis> {
        let bias = self.cfg.bias();
        let model = SimilarityModel { alpha };
        let (g, c) = self.ready()?;
        let at = |e: AnalysisError| e.at("analyze-bias");
        let (within, global) = within_cluster_gap(g, c, &model).map_err(at)?;
        let report = BiasAnalysis {
            k: c.k,
            alpha,
            within_cluster_similarity: within,
            global_similarity: global,
            expected_step_unbiased: expected_step_similarity(&strategy_unbiased(g), &model, g).map_err(at)?,
            expected_step_biased: expected_step_similarity(&strategy_biased(g, c, &bias), &model, g).map_err(at)?,
            closed_form: printed_form_report(g, c, &bias, &model).map_err(at)?,
        };
        let rows = sweep.map(|s| bias_sweep(g, &s)).transpose().map_err(at)?;
        let path = self.out.join("analysis.json");
        fs::write(&path, serde_json::to_string_pretty(&report).expect("analysis serialize") + "\n").map_err(|e| io_at("analyze-bias", &path, e))?;
        self.validated("analyze-bias", &path, Format::Json, self.cfg.seed)?;
        if let Some(rows) = rows {
            let path = self.out.join("sweep.csv");
            write_sweep_csv(&rows, &path).map_err(at)?;
            self.validated("analyze-bias", &path, Format::Csv { header: "k,b_d,seed,f1_micro,f1_macro" }, self.cfg.seed)?;
        }
        Ok(report)
    }

    fn write_manifest(&self, records: &[ManifestRecord]) -> std::io::Result<()> {
        let stages: Vec<&str> = records.iter().map(|r| r.stage.as_str()).collect();
        let mut w = BufWriter::new(fs::File::create(self.out.join(MANIFEST))?);
        for r in self.previous.iter().filter(|r| !stages.contains(&r.stage.as_str())).chain(records) {
            writeln!(w, "{}", serde_json::to_string(r).expect("manifest serialize"))?;
        }
        w.flush()
    }

    pub fn finish(self) -> Result<PathBuf> {
        self.write_manifest(&self.records).map_err(|e| io_at("manifest", &self.out, e))?;
        Ok(self.out.join(MANIFEST))
    }

    /// Marks everything this session wrote as incomplete, appends the
    /// failure, and hands the error back.
    pub fn abort(self, err: PipelineError) -> PipelineError {
        let mut records: Vec<ManifestRecord> = self.records.iter().cloned().map(|r| ManifestRecord { complete: false, ..r }).collect();
        records.push(ManifestRecord {
            stage: err.stage.into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            output_path: String::new(),
            checksum: String::new(),
            complete: false,
            error: Some(err.to_string()),
        });
        if let Err(e) = self.write_manifest(&records) {
            log::error!("could not write manifest: {e}");
        }
        err
    }
}

/// Runs `f` on a session and writes the manifest either way.
pub fn with_session<T>(cfg: RunConfig, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
    let mut session = Session::new(cfg)?;
    match f(&mut session) {
        Ok(v) => {
            session.finish()?;
            Ok(v)
        }
        Err(e) => Err(session.abort(e)),
    }
}

/// Cluster, train and evaluate.
pub fn run_pipeline(cfg: RunConfig) -> Result<MetricsRecord> {
    with_session(cfg, |s| {
        s.clusters()?;
        let params = s.train()?;
        s.evaluate(&params)
    })
}
