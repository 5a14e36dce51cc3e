use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pge_core::analysis::SweepConfig;
use pge_core::config::RunConfig;
use pge_core::encoder::EncoderMode;
use pge_core::pipeline::{run_pipeline, with_session, FailureKind, PipelineError};

#[derive(Parser)]
#[command(name = "pge", version, about = "Property graph embedding with biased neighborhood sampling")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set bias.b_d=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// node_class or link_pred.
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    b_s: Option<f64>,
    #[arg(long, global = true)]
    b_d: Option<f64>,
    /// Sample neighbors uniformly (b_d = b_s).
    #[arg(long, global = true)]
    unbiased: bool,
    /// Ignore edge properties, labels and direction in aggregation.
    #[arg(long, global = true)]
    no_edge_info: bool,
    /// Redraw the neighborhood sample every epoch (default true).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    resample_per_epoch: Option<bool>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured (usually synthetic) graph as node/edge/label files.
    Generate,
    /// Cluster nodes by property vectors.
    Cluster,
    /// Draw the two-hop neighborhood sample.
    Sample,
    /// Train the encoder.
    Train,
    /// Evaluate trained parameters.
    Eval {
        /// Defaults to `params.bin` in the output directory.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Similarity gap, strategy expectations and an optional bias sweep.
    AnalyzeBias {
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Comma-separated b_d values; enables the sweep.
        #[arg(long, value_delimiter = ',')]
        bd_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 5, 10])]
        k_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        sweep_seeds: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        sweep_epochs: usize,
    },
    /// Cluster, train and evaluate.
    Pipeline,
}

enum Failure {
    Usage(anyhow::Error),
    Stage(PipelineError),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Stage(e)
    }
}

fn build_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v).with_context(|| format!("--{k}"));
    if let Some(o) = &c.out {
        set("output_dir", o.display().to_string())?;
    }
    if let Some(s) = c.seed {
        set("seed", s.to_string())?;
    }
    if let Some(t) = &c.task {
        set("task", t.clone())?;
    }
    if let Some(e) = c.epochs {
        set("train.epochs", e.to_string())?;
    }
    if let Some(b) = c.b_s {
        set("bias.b_s", b.to_string())?;
    }
    if let Some(b) = c.b_d {
        set("bias.b_d", b.to_string())?;
    }
    if let Some(r) = c.resample_per_epoch {
        set("train.resample_per_epoch", r.to_string())?;
    }
    for kv in &c.sets {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if c.unbiased {
        cfg.b_d = cfg.b_s;
    }
    if c.no_edge_info {
        cfg.model.mode = EncoderMode::Plain;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = build_config(&cli.common).map_err(Failure::Usage)?;
    match cli.command {
        Command::Generate => {
            let dir = with_session(cfg, |s| s.write_graph())?;
            println!("{}", dir.display());
        }
        Command::Cluster => {
            let k = with_session(cfg, |s| s.clusters().map(|c| c.k))?;
            println!("k = {k}");
        }
        Command::Sample => {
            let path = with_session(cfg, |s| s.sample())?;
            println!("{}", path.display());
        }
        Command::Train => {
            let n = with_session(cfg, |s| s.train().map(|p| p.n_params()))?;
            println!("trained {n} parameters");
        }
        Command::Eval { params } => {
            let record = with_session(cfg, |s| {
                let path = params.unwrap_or_else(|| s.output_dir().join("params.bin"));
                let p = s.load_params(&path)?;
                s.evaluate(&p)
            })?;
            println!("{}", serde_json::to_string(&record).expect("metrics serialize"));
        }
        Command::AnalyzeBias { alpha, bd_grid, k_grid, sweep_seeds, sweep_epochs } => {
            let sweep = (!bd_grid.is_empty()).then(|| SweepConfig {
                k_grid,
                bd_grid,
                seeds: sweep_seeds,
                epochs: sweep_epochs,
                bias: cfg.bias(),
                train: cfg.train(),
                model: cfg.model.clone(),
                split_ratios: cfg.split,
            });
            let report = with_session(cfg, |s| s.analyze_bias(alpha, sweep))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("analysis serialize"));
        }
        Command::Pipeline => {
            let record = run_pipeline(cfg)?;
            println!("{}", serde_json::to_string(&record).expect("metrics serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.common.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(FailureKind::Config.exit_code() as u8);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(FailureKind::Config.exit_code() as u8)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
