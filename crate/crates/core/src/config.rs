//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! task = node_class
//! nodes = data/nodes.tsv
//! edges = data/edges.tsv
//! labels = data/labels.tsv
//! bias.b_d = 1000
//! seed = 7
//! ```
//!
//! Without `nodes`/`edges` the graph comes from the synthetic generator
//! (`synthetic.*` keys). Every sub-seed is derived from `seed` and a
//! component name.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{NodeClustering, DEFAULT_MAX_ITER, DEFAULT_MIN_PTS};
use crate::encoder::EncoderMode;
use crate::experiment::ModelConfig;
use crate::rng::derive_seed;
use crate::sampler::BiasConfig;
use crate::synthetic::SyntheticSpec;
use crate::trainer::{Task, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("{key}: file {path} does not exist")]
    MissingPath { key: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct FileSource {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterMethodName {
    Auto,
    Kmeans,
    Dbscan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub files: Option<FileSource>,
    pub directed: bool,
    pub synthetic: SyntheticSpec,
    pub cluster_method: ClusterMethodName,
    pub cluster_k: Option<usize>,
    pub cluster_eps: Option<f64>,
    pub cluster_min_pts: usize,
    pub cluster_max_iter: usize,
    pub b_s: f64,
    pub b_d: f64,
    pub sample_size: usize,
    pub learning_rate: f64,
    /// `None` uses the task default.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub neg_samples: usize,
    pub resample_per_epoch: bool,
    pub normalize_embeddings: bool,
    pub model: ModelConfig,
    pub split: (f64, f64, f64),
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bias = BiasConfig::default();
        let train = TrainConfig::for_task(Task::NodeClass, 0);
        RunConfig {
            task: Task::NodeClass,
            files: None,
            directed: false,
            synthetic: SyntheticSpec::default(),
            cluster_method: ClusterMethodName::Auto,
            cluster_k: None,
            cluster_eps: None,
            cluster_min_pts: DEFAULT_MIN_PTS,
            cluster_max_iter: DEFAULT_MAX_ITER,
            b_s: bias.b_s,
            b_d: bias.b_d,
            sample_size: bias.sample_size,
            learning_rate: train.learning_rate,
            epochs: None,
            batch_size: train.batch_size,
            neg_samples: train.neg_samples,
            resample_per_epoch: train.resample_per_epoch,
            normalize_embeddings: train.normalize_embeddings,
            model: ModelConfig::default(),
            split: (0.7, 0.1, 0.2),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue { key: key.into(), value: value.into(), msg: e.to_string() })
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_auto<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key; flags and config files both go through here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: &str| ConfigError::BadValue { key: key.into(), value: value.into(), msg: msg.into() };
        match key {
            "task" => {
                self.task = match value {
                    "node_class" => Task::NodeClass,
                    "link_pred" => Task::LinkPred,
                    _ => return Err(bad("expected node_class or link_pred")),
                }
            }
            "nodes" | "edges" | "labels" => {
                let files = self.files.get_or_insert_with(|| FileSource { nodes: PathBuf::new(), edges: PathBuf::new(), labels: None });
                match key {
                    "nodes" => files.nodes = value.into(),
                    "edges" => files.edges = value.into(),
                    _ => files.labels = (!value.is_empty()).then(|| value.into()),
                }
            }
            "directed" => self.directed = parse(key, value)?,
            "synthetic.n_nodes" => self.synthetic.n_nodes = parse(key, value)?,
            "synthetic.communities" => self.synthetic.n_communities = parse(key, value)?,
            "synthetic.intra_prob" => self.synthetic.intra_edge_prob = parse(key, value)?,
            "synthetic.inter_prob" => self.synthetic.inter_edge_prob = parse(key, value)?,
            "synthetic.property_dim" => self.synthetic.property_dim = parse(key, value)?,
            "synthetic.separation" => self.synthetic.blob_separation = parse(key, value)?,
            "synthetic.signed" => self.synthetic.signed_edges = parse(key, value)?,
            "cluster.method" => {
                self.cluster_method = match value {
                    "auto" => ClusterMethodName::Auto,
                    "kmeans" => ClusterMethodName::Kmeans,
                    "dbscan" => ClusterMethodName::Dbscan,
                    _ => return Err(bad("expected auto, kmeans or dbscan")),
                }
            }
            "cluster.k" => self.cluster_k = parse_auto(key, value)?,
            "cluster.eps" => self.cluster_eps = parse_auto(key, value)?,
            "cluster.min_pts" => self.cluster_min_pts = parse(key, value)?,
            "cluster.max_iter" => self.cluster_max_iter = parse(key, value)?,
            "bias.b_s" => self.b_s = parse(key, value)?,
            "bias.b_d" => self.b_d = parse(key, value)?,
            "bias.sample_size" => self.sample_size = parse(key, value)?,
            "train.learning_rate" => self.learning_rate = parse(key, value)?,
            "train.epochs" => self.epochs = parse_auto(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.neg_samples" => self.neg_samples = parse(key, value)?,
            "train.resample_per_epoch" => self.resample_per_epoch = parse(key, value)?,
            "train.normalize_embeddings" => self.normalize_embeddings = parse(key, value)?,
            "model.mode" => {
                self.model.mode = match value {
                    "edge_aware" => EncoderMode::EdgeAware,
                    "plain" => EncoderMode::Plain,
                    _ => return Err(bad("expected edge_aware or plain")),
                }
            }
            "model.hidden" => self.model.hidden = parse(key, value)?,
            "model.link_dim" => self.model.link_dim = parse(key, value)?,
            "model.out_proj" => self.model.out_proj = parse(key, value)?,
            "model.edge_k" => self.model.edge_k = parse(key, value)?,
            "model.split_by_direction" => self.model.split_by_direction = parse(key, value)?,
            "split" => {
                let parts: Vec<f64> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                match parts[..] {
                    [a, b, c] => self.split = (a, b, c),
                    _ => return Err(bad("expected three comma-separated ratios")),
                }
            }
            "output_dir" => self.output_dir = value.into(),
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order. Parsing it back yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut out = self.numeric_text();
        out.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        out
    }

    /// Every key that can change a numeric result.
    fn numeric_text(&self) -> String {
        let task = match self.task {
            Task::NodeClass => "node_class",
            Task::LinkPred => "link_pred",
        };
        let method = match self.cluster_method {
            ClusterMethodName::Auto => "auto",
            ClusterMethodName::Kmeans => "kmeans",
            ClusterMethodName::Dbscan => "dbscan",
        };
        let mode = match self.model.mode {
            EncoderMode::EdgeAware => "edge_aware",
            EncoderMode::Plain => "plain",
        };
        let s = &self.synthetic;
        let mut lines = vec![format!("task = {task}")];
        if let Some(f) = &self.files {
            lines.push(format!("nodes = {}", f.nodes.display()));
            lines.push(format!("edges = {}", f.edges.display()));
            lines.push(format!("labels = {}", f.labels.as_ref().map(|p| p.display().to_string()).unwrap_or_default()));
        }
        lines.extend([
            format!("directed = {}", self.directed),
            format!("synthetic.n_nodes = {}", s.n_nodes),
            format!("synthetic.communities = {}", s.n_communities),
            format!("synthetic.intra_prob = {:?}", s.intra_edge_prob),
            format!("synthetic.inter_prob = {:?}", s.inter_edge_prob),
            format!("synthetic.property_dim = {}", s.property_dim),
            format!("synthetic.separation = {:?}", s.blob_separation),
            format!("synthetic.signed = {}", s.signed_edges),
            format!("cluster.method = {method}"),
            format!("cluster.k = {}", show_auto(&self.cluster_k)),
            format!("cluster.eps = {}", show_auto(&self.cluster_eps.map(|e| format!("{e:?}")))),
            format!("cluster.min_pts = {}", self.cluster_min_pts),
            format!("cluster.max_iter = {}", self.cluster_max_iter),
            format!("bias.b_s = {:?}", self.b_s),
            format!("bias.b_d = {:?}", self.b_d),
            format!("bias.sample_size = {}", self.sample_size),
            format!("train.learning_rate = {:?}", self.learning_rate),
            format!("train.epochs = {}", show_auto(&self.epochs)),
            format!("train.batch_size = {}", self.batch_size),
            format!("train.neg_samples = {}", self.neg_samples),
            format!("train.resample_per_epoch = {}", self.resample_per_epoch),
            format!("train.normalize_embeddings = {}", self.normalize_embeddings),
            format!("model.mode = {mode}"),
            format!("model.hidden = {}", self.model.hidden),
            format!("model.link_dim = {}", self.model.link_dim),
            format!("model.out_proj = {}", self.model.out_proj),
            format!("model.edge_k = {}", self.model.edge_k),
            format!("model.split_by_direction = {}", self.model.split_by_direction),
            format!("split = {:?},{:?},{:?}", self.split.0, self.split.1, self.split.2),
            format!("seed = {}", self.seed),
        ]);
        lines.iter().map(|l| format!("{l}\n")).collect()
    }

    /// SHA-256 of the canonical text, without the output directory.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.numeric_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.files {
            for (key, p) in [("nodes", Some(&f.nodes)), ("edges", Some(&f.edges)), ("labels", f.labels.as_ref())] {
                if let Some(p) = p {
                    if p.as_os_str().is_empty() {
                        return Err(ConfigError::Invalid(format!("`{key}` is empty; give both nodes and edges files")));
                    }
                    if !p.exists() {
                        return Err(ConfigError::MissingPath { key, path: p.clone() });
                    }
                }
            }
        } else {
            self.synthetic.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.bias().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!("split ratios {:?} must be in [0, 1] and sum to 1", self.split)));
        }
        if self.model.hidden == 0 || self.model.link_dim == 0 {
            return Err(ConfigError::Invalid("model widths must be positive".into()));
        }
        if self.cluster_k == Some(0) {
            return Err(ConfigError::Invalid("cluster.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn component_seed(&self, component: &str) -> u64 {
        derive_seed(self.seed, component)
    }

    pub fn clustering(&self) -> NodeClustering {
        match self.cluster_method {
            ClusterMethodName::Auto => NodeClustering::Auto,
            ClusterMethodName::Kmeans => NodeClustering::Kmeans { k: self.cluster_k, max_iter: self.cluster_max_iter },
            ClusterMethodName::Dbscan => NodeClustering::Dbscan { eps: self.cluster_eps, min_pts: self.cluster_min_pts },
        }
    }

    pub fn bias(&self) -> BiasConfig {
        BiasConfig { b_s: self.b_s, b_d: self.b_d, sample_size: self.sample_size, hops: 2, seed: self.component_seed("sampler") }
    }

    pub fn train(&self) -> TrainConfig {
        let mut t = TrainConfig::for_task(self.task, self.component_seed("trainer"));
        t.learning_rate = self.learning_rate;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        t.batch_size = self.batch_size;
        t.neg_samples = self.neg_samples;
        t.resample_per_epoch = self.resample_per_epoch;
        t.normalize_embeddings = self.normalize_embeddings;
        t
    }
}
