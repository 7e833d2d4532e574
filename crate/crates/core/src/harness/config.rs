use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use crate::client::{Ablation, ClassifierInput, ModelConfig, PriorConfig, TrainConfig};
use crate::encoder::{Activation, RoutingConfig};
use crate::graph::{GraphFormat, SplitRatios, SyntheticSpec};
use crate::partition::{PartitionMode, DEFAULT_BALANCE};
use crate::server::{AlphaMode, JsMethod, DEFAULT_TAU};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// Edge list plus node table, see [`crate::graph::load_graph`].
    Files {
        edges: PathBuf,
        nodes: PathBuf,
        #[serde(default)]
        format: GraphFormat,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fediih,
    Fedavg,
    Local,
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub add_self_loops: bool,
    pub partition_mode: PartitionMode,
    pub clients: usize,
    pub partition_seed: u64,
    /// Imported assignment overriding the built-in partitioner.
    pub partition_file: Option<PathBuf>,
    pub balance: f64,
    pub split: SplitRatios,
    pub split_seed: u64,
    pub k: usize,
    pub d_out: usize,
    pub routing: RoutingConfig,
    pub activation: Activation,
    pub classifier_input: ClassifierInput,
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda_elbo: f64,
    pub tau: f64,
    pub prior: PriorConfig,
    pub method: Method,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub participation: f64,
    pub js_method: JsMethod,
    pub alpha_mode: AlphaMode,
    pub metric: Metric,
    /// Worker threads for client training; 0 picks `min(clients, cores)`.
    pub threads: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            add_self_loops: false,
            partition_mode: PartitionMode::NonOverlapping,
            clients: 5,
            partition_seed: 0,
            partition_file: None,
            balance: DEFAULT_BALANCE,
            split: SplitRatios::default(),
            split_seed: 0,
            k: 2,
            d_out: 16,
            routing: RoutingConfig::default(),
            activation: Activation::default(),
            classifier_input: ClassifierInput::default(),
            rounds: 20,
            epochs: 1,
            lr: 0.01,
            weight_decay: 0.0,
            dropout: 0.0,
            lambda_elbo: 1.0,
            tau: DEFAULT_TAU,
            prior: PriorConfig::default(),
            method: Method::Fediih,
            ablation: Ablation::default(),
            seeds: vec![0],
            participation: 1.0,
            js_method: JsMethod::default(),
            alpha_mode: AlphaMode::Deterministic,
            metric: Metric::Accuracy,
            threads: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.clients == 0 {
            return bad("clients must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must lie in (0, 1]");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.lambda_elbo >= 0.0) {
            return bad("lr, weight_decay and lambda_elbo must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite");
        }
        if self.method != Method::Fediih && self.ablation != Ablation::default() {
            return bad("ablation toggles apply to the fediih method only");
        }
        self.model_config().validate()?;
        self.prior.validate()?;
        Ok(())
    }

    /// Model configuration after applying ablations.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            d_out: self.d_out,
            routing: self.routing,
            activation: self.activation,
            classifier_input: self.classifier_input,
        }
        .effective(&self.ablation)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            lambda_elbo: self.lambda_elbo,
            ablation: self.ablation,
        }
    }

    /// Worker thread count actually used.
    pub fn thread_count(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        self.clients.min(cores).max(1)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
