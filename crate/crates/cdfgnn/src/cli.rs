//! Command-line interface.
//!
//! Subcommands: `gen-graph` writes a synthetic dataset, `partition` builds
//! and saves a plan, `train` runs distributed training, `oracle-train` runs
//! the single-device reference, and `compare` runs both and checks that they
//! agree. Every training knob can come from a `key = value` config file,
//! a `CDFGNN_*` environment variable, or a flag; flags and environment beat
//! the file, which beats the defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{
    gen_planted_features, gen_power_law, load_edge_list, load_features, load_labels,
    write_edge_list, write_features, write_labels, Graph, LabelSet,
};
use crate::metrics::{format_metrics_csv, TrainSummary};
use crate::oracle;
use crate::partition::{compute_stats, load_plan, partition, write_plan, ClusterShape, EvaParams};
use crate::runtime::{self, TrainOutcome};
use crate::tensor::{self, Scalar};

pub const EDGES_FILE: &str = "graph.edges";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Parser)]
#[command(
    name = "cdfgnn",
    version,
    about = "Cache-accelerated distributed full-batch GNN training, desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic power-law graph with planted community features.
    GenGraph(GenGraphArgs),
    /// Partition a graph and write the plan directory.
    Partition(PartitionArgs),
    /// Train with the distributed runtime.
    Train(TrainArgs),
    /// Train on a single device with no partitioning, caching, or
    /// quantization.
    OracleTrain(OracleArgs),
    /// Run both trainers and compare gradients and final parameters.
    /// Exits 1 when they disagree beyond the tolerances.
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct GenGraphArgs {
    #[arg(long, default_value_t = 1000)]
    pub vertices: usize,
    /// Edges attached per arriving vertex.
    #[arg(long, default_value_t = 3)]
    pub edges_per_vertex: usize,
    #[arg(long, default_value_t = 1, env = "CDFGNN_GRAPH_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Standard deviation of the per-coordinate feature noise.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Output directory for graph.edges, features.bin, labels.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PartitionArgs {
    /// Dataset directory (needs graph.edges).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1, env = "CDFGNN_NUM_HOSTS")]
    pub num_hosts: u32,
    #[arg(long, default_value_t = 1, env = "CDFGNN_GPUS_PER_HOST")]
    pub gpus_per_host: u32,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Seed for the streaming order of edges.
    #[arg(long, default_value_t = 1, env = "CDFGNN_ORDER_SEED")]
    pub order_seed: u64,
    /// Output plan directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training knobs shared by train, oracle-train, and compare. All optional;
/// unset values fall back to the config file and then the defaults.
#[derive(Args, Default, Clone)]
pub struct TrainOverrides {
    #[arg(long, env = "CDFGNN_NUM_HOSTS")]
    pub num_hosts: Option<u32>,
    #[arg(long, env = "CDFGNN_GPUS_PER_HOST")]
    pub gpus_per_host: Option<u32>,
    #[arg(long, env = "CDFGNN_NUM_LAYERS")]
    pub num_layers: Option<usize>,
    #[arg(long, env = "CDFGNN_HIDDEN_DIM")]
    pub hidden_dim: Option<usize>,
    #[arg(long, env = "CDFGNN_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "CDFGNN_EPOCHS")]
    pub epochs: Option<u64>,
    /// sgd or adam.
    #[arg(long, env = "CDFGNN_OPTIMIZER")]
    pub optimizer: Option<String>,
    #[arg(long, env = "CDFGNN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "CDFGNN_ORDER_SEED")]
    pub order_seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// true/false: adaptive cache on or off.
    #[arg(long, env = "CDFGNN_CACHE")]
    pub cache: Option<bool>,
    #[arg(long, env = "CDFGNN_EPS_INIT")]
    pub eps_init: Option<f64>,
    #[arg(long)]
    pub mu1: Option<f64>,
    #[arg(long)]
    pub mu2: Option<f64>,
    #[arg(long)]
    pub nu1: Option<f64>,
    #[arg(long)]
    pub nu2: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Payload quantization width 1..=16, or "none".
    #[arg(long, env = "CDFGNN_QUANT_BITS")]
    pub quant_bits: Option<String>,
    /// delta or replace.
    #[arg(long, env = "CDFGNN_SCATTER_MODE")]
    pub scatter_mode: Option<String>,
    /// true/false: apply weight updates during the backward pass.
    #[arg(long)]
    pub per_layer_update: Option<bool>,
    /// true/false: record wall time per epoch (breaks byte reproducibility).
    #[arg(long, env = "CDFGNN_TIMING")]
    pub timing: Option<bool>,
    /// Seed for artificial scheduling jitter (testing only).
    #[arg(long)]
    pub sched_jitter: Option<u64>,
    #[arg(long)]
    pub barrier_timeout_s: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(num_hosts);
        set!(gpus_per_host);
        set!(num_layers);
        set!(hidden_dim);
        set!(lr);
        set!(epochs);
        set!(seed);
        set!(order_seed);
        set!(alpha);
        set!(beta);
        set!(gamma);
        set!(eps_init);
        set!(per_layer_update);
        set!(timing);
        set!(barrier_timeout_s);
        if let Some(v) = self.optimizer.as_deref() {
            cfg.optimizer = config::parse_optimizer(v)?;
        }
        if let Some(v) = self.cache {
            cfg.cache_enabled = v;
        }
        if let Some(v) = self.mu1 {
            cfg.eps_cfg.mu1 = v;
        }
        if let Some(v) = self.mu2 {
            cfg.eps_cfg.mu2 = v;
        }
        if let Some(v) = self.nu1 {
            cfg.eps_cfg.nu1 = v;
        }
        if let Some(v) = self.nu2 {
            cfg.eps_cfg.nu2 = v;
        }
        if let Some(v) = self.xi {
            cfg.eps_cfg.xi = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.eps_cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.eps_cfg.lambda2 = v;
        }
        if let Some(v) = self.quant_bits.as_deref() {
            config::apply_setting(cfg, "quant_bits", v)?;
        }
        if let Some(v) = self.scatter_mode.as_deref() {
            cfg.scatter_mode = config::parse_scatter_mode(v)?;
        }
        if let Some(v) = self.sched_jitter {
            cfg.sched_jitter = Some(v);
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (graph.edges, features.bin, labels.txt).
    #[arg(long)]
    pub data: PathBuf,
    /// Existing plan directory; omitted means partition in process.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F64, env = "CDFGNN_PRECISION")]
    pub precision: Precision,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F64, env = "CDFGNN_PRECISION")]
    pub precision: Precision,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F64, env = "CDFGNN_PRECISION")]
    pub precision: Precision,
    /// Force exact sync: cache off and no quantization.
    #[arg(long, default_value_t = false)]
    pub exact: bool,
    /// Max relative infinity-norm error of per-epoch summed gradients.
    #[arg(long, default_value_t = 1e-8)]
    pub tol_grads: f64,
    /// Max absolute infinity-norm error of final parameters.
    #[arg(long, default_value_t = 1e-6)]
    pub tol_params: f64,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

pub fn resolve_config(
    config_path: Option<&Path>,
    overrides: &TrainOverrides,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = config_path {
        config::apply_config_file(&mut cfg, path)?;
    }
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset<T: Scalar>(dir: &Path) -> Result<(Graph, crate::graph::FeatureMatrix<T>, LabelSet)> {
    let graph = load_edge_list(&dir.join(EDGES_FILE))?;
    let features = load_features::<T>(&dir.join(FEATURES_FILE))?;
    let labels = load_labels(&dir.join(LABELS_FILE))?;
    if features.rows() != graph.num_vertices() {
        return Err(Error::data(format!(
            "features cover {} vertices, graph has {}",
            features.rows(),
            graph.num_vertices()
        )));
    }
    if labels.labels.len() != graph.num_vertices() {
        return Err(Error::data(format!(
            "labels cover {} vertices, graph has {}",
            labels.labels.len(),
            graph.num_vertices()
        )));
    }
    Ok((graph, features, labels))
}

fn run_gen_graph(args: &GenGraphArgs) -> Result<()> {
    let graph = gen_power_law(args.vertices, args.edges_per_vertex, args.seed);
    fs::create_dir_all(&args.out)?;
    write_edge_list(&graph, &args.out.join(EDGES_FILE))?;
    match args.precision {
        Precision::F32 => {
            let (features, labels) = gen_planted_features::<f32>(
                &graph,
                args.classes,
                args.feature_dim,
                args.noise,
                args.seed,
            );
            write_features(&features, &args.out.join(FEATURES_FILE))?;
            write_labels(&labels, &args.out.join(LABELS_FILE))?;
        }
        Precision::F64 => {
            let (features, labels) = gen_planted_features::<f64>(
                &graph,
                args.classes,
                args.feature_dim,
                args.noise,
                args.seed,
            );
            write_features(&features, &args.out.join(FEATURES_FILE))?;
            write_labels(&labels, &args.out.join(LABELS_FILE))?;
        }
    }
    println!(
        "{}",
        serde_json::json!({
            "vertices": graph.num_vertices(),
            "edges": graph.num_edges(),
            "out": args.out,
        })
    );
    Ok(())
}

fn run_partition(args: &PartitionArgs) -> Result<()> {
    let graph = load_edge_list(&args.data.join(EDGES_FILE))?;
    let shape = ClusterShape::new(args.num_hosts, args.gpus_per_host);
    if shape.num_workers() > 64 {
        return Err(Error::usage("worker count must be at most 64"));
    }
    let params = EvaParams { alpha: args.alpha, beta: args.beta, gamma: args.gamma };
    let plan = partition(&graph, shape, params, args.order_seed);
    write_plan(&plan, &args.out)?;
    let stats = compute_stats(&plan);
    println!(
        "{}",
        serde_json::to_string_pretty(&stats).map_err(|e| Error::protocol(e.to_string()))?
    );
    Ok(())
}

fn write_summary(dir: &Path, summary: &TrainSummary) -> Result<()> {
    let json =
        serde_json::to_string_pretty(summary).map_err(|e| Error::protocol(e.to_string()))?;
    fs::write(dir.join(SUMMARY_FILE), json.clone() + "\n")?;
    println!("{json}");
    Ok(())
}

fn run_train_typed<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let (graph, features, labels) = load_dataset::<T>(&args.data)?;
    let plan = match &args.plan {
        Some(dir) => load_plan(dir)?,
        None => {
            let shape = ClusterShape::new(cfg.num_hosts, cfg.gpus_per_host);
            let params = EvaParams { alpha: cfg.alpha, beta: cfg.beta, gamma: cfg.gamma };
            partition(&graph, shape, params, cfg.order_seed)
        }
    };
    let out: TrainOutcome<T> = runtime::train(&graph, &features, &labels, &plan, &cfg, false)?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join(METRICS_FILE),
        format_metrics_csv(&out.metrics, cfg.num_layers),
    )?;
    write_summary(&args.out, &out.summary)
}

fn run_oracle_typed<T: Scalar>(args: &OracleArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let (graph, features, labels) = load_dataset::<T>(&args.data)?;
    let dims = cfg.layer_dims(features.cols(), labels.num_classes);
    let run = oracle::oracle_train(
        &graph,
        &features,
        &labels,
        &dims,
        cfg.seed,
        cfg.optimizer,
        cfg.lr,
        cfg.epochs,
        false,
    );
    fs::create_dir_all(&args.out)?;
    let mut csv = String::from("epoch,loss,train_acc,val_acc\n");
    for (i, r) in run.records.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", i + 1, r.loss, r.train_acc, r.val_acc));
    }
    fs::write(args.out.join(METRICS_FILE), csv)?;
    let last = run.records.last().ok_or_else(|| Error::usage("epochs must be at least 1"))?;
    let summary = TrainSummary {
        epochs: cfg.epochs,
        final_loss: last.loss,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        final_eps: 0.0,
        gather_sends: 0,
        scatter_sends: 0,
        inner_bytes: 0,
        outer_bytes: 0,
        modeled_comm_s: 0.0,
        wall_s: 0.0,
    };
    write_summary(&args.out, &summary)
}

/// Runs distributed and single-device training on the same data and weights,
/// then reports the largest deviations. Returns false when a tolerance is
/// exceeded.
fn run_compare_typed<T: Scalar>(args: &CompareArgs) -> Result<bool> {
    let mut cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    if args.exact {
        cfg.cache_enabled = false;
        cfg.quant_bits = None;
    }
    let (graph, features, labels) = load_dataset::<T>(&args.data)?;
    let shape = ClusterShape::new(cfg.num_hosts, cfg.gpus_per_host);
    let eva = EvaParams { alpha: cfg.alpha, beta: cfg.beta, gamma: cfg.gamma };
    let plan = partition(&graph, shape, eva, cfg.order_seed);
    let dist: TrainOutcome<T> = runtime::train(&graph, &features, &labels, &plan, &cfg, true)?;

    let dims = cfg.layer_dims(features.cols(), labels.num_classes);
    let reference = oracle::oracle_train(
        &graph,
        &features,
        &labels,
        &dims,
        cfg.seed,
        cfg.optimizer,
        cfg.lr,
        cfg.epochs,
        true,
    );

    let mut worst_grad = 0.0f64;
    for (got, want) in dist.grad_trace.iter().zip(&reference.grad_trace) {
        for l in 0..dims.len() - 1 {
            let diff = tensor::sub(&got[l], &want[l]);
            let denom = tensor::linf_norm(&want[l]).to_f64().max(1e-300);
            worst_grad = worst_grad.max(tensor::linf_norm(&diff).to_f64() / denom);
        }
    }
    let mut worst_param = 0.0f64;
    for l in 0..dims.len() - 1 {
        let diff = tensor::sub(&dist.final_params.weights[l], &reference.params.weights[l]);
        worst_param = worst_param.max(tensor::linf_norm(&diff).to_f64());
    }
    let ok = worst_grad <= args.tol_grads && worst_param <= args.tol_params;
    println!(
        "{}",
        serde_json::json!({
            "epochs": cfg.epochs,
            "workers": shape.num_workers(),
            "max_grad_rel_err": worst_grad,
            "max_param_abs_err": worst_param,
            "tol_grads": args.tol_grads,
            "tol_params": args.tol_params,
            "ok": ok,
        })
    );
    Ok(ok)
}

/// Dispatches a parsed command line; the result is the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::GenGraph(args) => run_gen_graph(args).map(|_| 0),
        Command::Partition(args) => run_partition(args).map(|_| 0),
        Command::Train(args) => match args.precision {
            Precision::F32 => run_train_typed::<f32>(args).map(|_| 0),
            Precision::F64 => run_train_typed::<f64>(args).map(|_| 0),
        },
        Command::OracleTrain(args) => match args.precision {
            Precision::F32 => run_oracle_typed::<f32>(args).map(|_| 0),
            Precision::F64 => run_oracle_typed::<f64>(args).map(|_| 0),
        },
        Command::Compare(args) => {
            let ok = match args.precision {
                Precision::F32 => run_compare_typed::<f32>(args)?,
                Precision::F64 => run_compare_typed::<f64>(args)?,
            };
            Ok(if ok { 0 } else { 1 })
        }
    }
}
