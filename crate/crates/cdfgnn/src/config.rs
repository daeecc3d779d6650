//! Training configuration with file, environment, and flag layering.
//!
//! Defaults are overridden by a `key = value` config file, which is in turn
//! overridden by environment variables and command-line flags (the CLI layer
//! applies those last). Unknown keys are usage errors, not warnings.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::cache::{EpsilonConfig, ScatterMode};
use crate::engine::OptimizerKind;
use crate::error::{Error, Result};
use crate::metrics::CostModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub num_hosts: u32,
    pub gpus_per_host: u32,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub epochs: u64,
    pub optimizer: OptimizerKind,
    /// Weight initialization seed.
    pub seed: u64,
    /// Edge stream order seed for partitioning.
    pub order_seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// When false, eps is pinned to 0 and the controller frozen; the sync
    /// protocol itself is unchanged.
    pub cache_enabled: bool,
    pub eps_init: f64,
    pub eps_cfg: EpsilonConfig,
    /// Linear quantization width for vertex payloads; None sends raw scalars.
    pub quant_bits: Option<u8>,
    pub scatter_mode: ScatterMode,
    /// Apply each layer's weight update as soon as its gradient is reduced
    /// instead of once at the end of the epoch. Numerically identical.
    pub per_layer_update: bool,
    /// Record wall-clock time per epoch. Off by default so outputs are
    /// byte-reproducible.
    pub timing: bool,
    /// Seed for artificial scheduling jitter in the runtime, used to check
    /// that results do not depend on message timing.
    pub sched_jitter: Option<u64>,
    pub barrier_timeout_s: f64,
    pub cost: CostModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_hosts: 1,
            gpus_per_host: 1,
            num_layers: 2,
            hidden_dim: 64,
            lr: 0.01,
            epochs: 100,
            optimizer: OptimizerKind::Sgd,
            seed: 1,
            order_seed: 1,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            cache_enabled: true,
            eps_init: 0.01,
            eps_cfg: EpsilonConfig::default(),
            quant_bits: None,
            scatter_mode: ScatterMode::Delta,
            per_layer_update: false,
            timing: false,
            sched_jitter: None,
            barrier_timeout_s: 30.0,
            cost: CostModel::default(),
        }
    }
}

impl TrainConfig {
    /// Dimensions of the weight stack for a given input width and class
    /// count: input, hidden repeated, classes.
    pub fn layer_dims(&self, feature_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![feature_dim];
        for _ in 1..self.num_layers {
            dims.push(self.hidden_dim);
        }
        dims.push(num_classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.num_hosts as u64 * self.gpus_per_host as u64;
        if self.num_hosts == 0 || self.gpus_per_host == 0 || p > 64 {
            return Err(Error::usage("worker count must be between 1 and 64"));
        }
        if self.num_layers < 1 {
            return Err(Error::usage("at least one layer is required"));
        }
        if let Some(b) = self.quant_bits {
            if !(1..=16).contains(&b) {
                return Err(Error::usage("quant_bits must be in 1..=16"));
            }
        }
        if self.eps_init < 0.0 {
            return Err(Error::usage("eps_init must be nonnegative"));
        }
        if self.lr <= 0.0 {
            return Err(Error::usage("lr must be positive"));
        }
        Ok(())
    }
}

pub fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(Error::usage(format!("unknown optimizer {s:?} (expected sgd or adam)"))),
    }
}

pub fn parse_scatter_mode(s: &str) -> Result<ScatterMode> {
    match s.to_ascii_lowercase().as_str() {
        "delta" => Ok(ScatterMode::Delta),
        "replace" => Ok(ScatterMode::Replace),
        _ => Err(Error::usage(format!("unknown scatter mode {s:?} (expected delta or replace)"))),
    }
}

pub fn parse_bool(key: &str, s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::usage(format!("{key}: expected a boolean, got {s:?}"))),
    }
}

fn parse_quant_bits(s: &str) -> Result<Option<u8>> {
    match s.to_ascii_lowercase().as_str() {
        "none" | "off" => Ok(None),
        other => {
            let b: u8 = other
                .parse()
                .map_err(|_| Error::usage(format!("quant_bits: bad value {s:?}")))?;
            Ok(Some(b))
        }
    }
}

/// Applies one `key = value` setting.
pub fn apply_setting(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let num = |what: &str| -> Result<f64> {
        value.parse::<f64>().map_err(|_| Error::usage(format!("{what}: bad number {value:?}")))
    };
    let int = |what: &str| -> Result<u64> {
        value.parse::<u64>().map_err(|_| Error::usage(format!("{what}: bad integer {value:?}")))
    };
    match key {
        "num_hosts" => cfg.num_hosts = int(key)? as u32,
        "gpus_per_host" => cfg.gpus_per_host = int(key)? as u32,
        "num_layers" => cfg.num_layers = int(key)? as usize,
        "hidden_dim" => cfg.hidden_dim = int(key)? as usize,
        "lr" => cfg.lr = num(key)?,
        "epochs" => cfg.epochs = int(key)?,
        "optimizer" => cfg.optimizer = parse_optimizer(value)?,
        "seed" => cfg.seed = int(key)?,
        "order_seed" => cfg.order_seed = int(key)?,
        "alpha" => cfg.alpha = num(key)?,
        "beta" => cfg.beta = num(key)?,
        "gamma" => cfg.gamma = num(key)?,
        "cache" => cfg.cache_enabled = parse_bool(key, value)?,
        "eps_init" => cfg.eps_init = num(key)?,
        "mu1" => cfg.eps_cfg.mu1 = num(key)?,
        "mu2" => cfg.eps_cfg.mu2 = num(key)?,
        "nu1" => cfg.eps_cfg.nu1 = num(key)?,
        "nu2" => cfg.eps_cfg.nu2 = num(key)?,
        "xi" => cfg.eps_cfg.xi = num(key)?,
        "lambda1" => cfg.eps_cfg.lambda1 = num(key)?,
        "lambda2" => cfg.eps_cfg.lambda2 = num(key)?,
        "quant_bits" => cfg.quant_bits = parse_quant_bits(value)?,
        "scatter_mode" => cfg.scatter_mode = parse_scatter_mode(value)?,
        "per_layer_update" => cfg.per_layer_update = parse_bool(key, value)?,
        "timing" => cfg.timing = parse_bool(key, value)?,
        "barrier_timeout_s" => cfg.barrier_timeout_s = num(key)?,
        "inner_bytes_per_s" => cfg.cost.inner_bytes_per_s = num(key)?,
        "outer_bytes_per_s" => cfg.cost.outer_bytes_per_s = num(key)?,
        "inner_latency_s" => cfg.cost.inner_latency_s = num(key)?,
        "outer_latency_s" => cfg.cost.outer_latency_s = num(key)?,
        _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Parses a `key = value` file into the config. Blank lines and lines
/// starting with `#` are skipped; keys may not repeat.
pub fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::usage(format!("{} line {}: expected key = value", path.display(), idx + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::usage(format!(
                "{} line {}: duplicate key {key:?}",
                path.display(),
                idx + 1
            )));
        }
        apply_setting(cfg, key, value)
            .map_err(|e| Error::usage(format!("{} line {}: {e}", path.display(), idx + 1)))?;
    }
    Ok(())
}
