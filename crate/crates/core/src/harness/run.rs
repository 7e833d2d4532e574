use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, ExperimentConfig, Method};
use super::metrics::{evaluate_metric, mean_std};
use crate::client::{
    evaluate, summarize_posterior, train_epoch, ClientData, ClientModel, LossBreakdown, ModelConfig, PosteriorSummary,
    TrainConfig,
};
use crate::graph::{generate_synthetic, load_graph, make_splits, GraphData, GraphFiles};
use crate::partition::{load_partition, partition_overlapping, partition_with_balance, Partition, PartitionMode};
use crate::server::{
    fedavg, fedavg_bias, separate_federate, update_global_alpha, GlobalLatent, SimilarityState,
};
use crate::tensor::{Adam, AdamConfig};
use crate::{Error, Result};

/// Mixes a run seed with stream coordinates into an independent seed.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const BROADCAST_STREAM: u64 = u64::MAX;
const SERVER_STREAM: u64 = u64::MAX - 1;

/// Loaded graph, its client partition and the per-client shards.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: GraphData,
    pub partition: Partition,
    pub shards: Vec<ClientData>,
}

pub fn load_dataset(dataset: &DatasetConfig) -> Result<GraphData> {
    Ok(match dataset {
        DatasetConfig::Synthetic(spec) => generate_synthetic(spec)?,
        DatasetConfig::Files { edges, nodes, format } => load_graph(&GraphFiles::new(edges, nodes), *format)?,
    })
}

pub fn partition_graph(config: &ExperimentConfig, graph: &GraphData) -> Result<Partition> {
    if let Some(path) = &config.partition_file {
        return Ok(load_partition(graph, path)?);
    }
    Ok(match config.partition_mode {
        PartitionMode::NonOverlapping => {
            partition_with_balance(graph, config.clients, config.partition_seed, config.balance)?
        }
        PartitionMode::Overlapping => partition_overlapping(graph, config.clients, config.partition_seed)?,
    })
}

/// Loads the dataset, partitions it, draws the global split and slices
/// one shard per client.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let graph = load_dataset(&config.dataset)?;
    let partition = partition_graph(config, &graph)?;
    if partition.m() != config.clients {
        return Err(Error::Config(format!(
            "partition has {} parts but {} clients are configured",
            partition.m(),
            config.clients
        )));
    }
    let masks = make_splits(&graph, config.split, config.split_seed)?;
    let index = graph.index_map();
    let shards = partition
        .assignments
        .iter()
        .map(|ids| {
            let mut idx: Vec<usize> = ids.iter().map(|id| index[id]).collect();
            idx.sort_unstable();
            let sub = graph.induced_by_indices(&idx)?;
            Ok(ClientData::new(sub, masks.subset(&idx), config.add_self_loops))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        graph,
        partition,
        shards,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub participated: bool,
    /// Breakdown of the last local epoch, when the client trained.
    pub loss: Option<LossBreakdown>,
    pub val: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    /// Client-averaged validation metric per round.
    pub round_val: Vec<f64>,
    pub round_test: Vec<f64>,
    /// 1-based round with the highest mean validation metric.
    pub best_round: Option<usize>,
    pub best_val: f64,
    pub best_test: f64,
    pub server_calls: usize,
    /// Similarities between the final client posteriors (fediih only).
    pub similarity: Option<SimilarityState>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    pub test_mean: f64,
    pub test_std: f64,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Copy with all timing fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> MetricsReport {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        for s in &mut r.seeds {
            s.wall_clock_secs = 0.0;
        }
        r
    }
}

struct ClientState {
    model: ClientModel,
    optimizer: Adam,
    upload: Option<PosteriorSummary>,
}

/// One seeded federated run over prepared shards.
pub struct Simulation<'a> {
    config: &'a ExperimentConfig,
    shards: &'a [ClientData],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: u64,
    clients: Vec<ClientState>,
    uploaders: Vec<usize>,
    alpha: GlobalLatent,
    round: usize,
    server_calls: usize,
    last_similarity: Option<SimilarityState>,
    pool: rayon::ThreadPool,
}

impl<'a> Simulation<'a> {
    /// Every client starts from the same broadcast initialization.
    pub fn new(config: &'a ExperimentConfig, shards: &'a [ClientData], seed: u64) -> Result<Self> {
        config.validate()?;
        let first = shards.first().ok_or_else(|| Error::Config("no client shards".into()))?;
        let model_cfg = config.model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, BROADCAST_STREAM, 0));
        let init = ClientModel::new(first.graph.d(), first.graph.num_classes(), &model_cfg, &mut rng)?;
        let adam = AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        };
        let clients = shards
            .iter()
            .map(|_| ClientState {
                model: init.clone(),
                optimizer: Adam::new(adam),
                upload: None,
            })
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.thread_count())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            config,
            shards,
            train_cfg: config.train_config(),
            alpha: GlobalLatent::zeros(model_cfg.k, model_cfg.block_dim()),
            model_cfg,
            seed,
            clients,
            uploaders: Vec::new(),
            round: 0,
            server_calls: 0,
            last_similarity: None,
            pool,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn server_calls(&self) -> usize {
        self.server_calls
    }

    pub fn models(&self) -> Vec<&ClientModel> {
        self.clients.iter().map(|c| &c.model).collect()
    }

    pub fn alpha(&self) -> &GlobalLatent {
        &self.alpha
    }

    pub fn last_similarity(&self) -> Option<&SimilarityState> {
        self.last_similarity.as_ref()
    }

    /// Summaries uploaded after the most recent local training.
    pub fn uploads(&self) -> Vec<PosteriorSummary> {
        self.uploaders
            .iter()
            .filter_map(|&i| self.clients[i].upload.clone())
            .collect()
    }

    fn participants(&self) -> Vec<usize> {
        let m = self.clients.len();
        if self.config.participation >= 1.0 {
            return (0..m).collect();
        }
        let count = ((self.config.participation * m as f64).ceil() as usize).clamp(1, m);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, SERVER_STREAM, self.round as u64));
        let mut chosen = sample(&mut rng, m, count).into_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Server phase: aggregates the latest uploads and hands the results back
    /// to the uploading clients. `run_round` calls this from round 2 on.
    pub fn aggregate(&mut self) -> Result<()> {
        let ids = self.uploaders.clone();
        if ids.is_empty() || self.config.method == Method::Local {
            return Ok(());
        }
        let params: Vec<_> = ids.iter().map(|&i| self.clients[i].model.federated()).collect();
        let sizes: Vec<usize> = ids.iter().map(|&i| self.shards[i].n()).collect();
        let summaries = ids
            .iter()
            .map(|&i| self.clients[i].upload.clone().ok_or(crate::server::ServerError::MissingClient(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let updated = match self.config.method {
            Method::Fediih => {
                let state = SimilarityState::compute(&summaries, self.config.js_method, self.config.tau)?;
                for (k, s) in state.similarity.iter().enumerate() {
                    log::debug!("round {} factor {k} similarity {:?}", self.round, s.data());
                }
                let mut out = separate_federate(&params, &state.beta)?;
                let biases: Vec<_> = params.iter().map(|p| p.cls_bias.clone()).collect();
                let bias = fedavg_bias(&biases, &sizes)?;
                for p in &mut out {
                    p.cls_bias = bias.clone();
                }
                self.last_similarity = Some(state);
                out
            }
            Method::Fedavg => vec![fedavg(&params, &sizes)?; ids.len()],
            Method::Local => unreachable!(),
        };
        self.alpha = update_global_alpha(
            &summaries,
            &self.config.prior,
            self.config.alpha_mode,
            stream_seed(self.seed, SERVER_STREAM, self.round as u64 + (1 << 32)),
        )?;
        for (&i, p) in ids.iter().zip(&updated) {
            self.clients[i].model.set_federated(p)?;
        }
        self.server_calls += 1;
        Ok(())
    }

    /// Server phase (from round 2), local training of this round's
    /// participants, then evaluation of every client.
    pub fn run_round(&mut self) -> Result<Vec<RoundRecord>> {
        self.round += 1;
        if self.round > 1 {
            self.aggregate()?;
        }
        let participants = self.participants();
        let mut active = vec![false; self.clients.len()];
        for &i in &participants {
            active[i] = true;
        }
        let (config, shards, model_cfg, train_cfg) = (self.config, self.shards, &self.model_cfg, &self.train_cfg);
        let (alpha, seed, round) = (&self.alpha.alpha_tilde, self.seed, self.round);
        let results: Vec<Result<RoundRecord>> = self.pool.install(|| {
            self.clients
                .par_iter_mut()
                .enumerate()
                .map(|(i, state)| {
                    let data = &shards[i];
                    let fail = |source| Error::ClientFailed { client: i, source };
                    let mut loss = None;
                    if active[i] {
                        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i as u64, round as u64));
                        for _ in 0..config.epochs {
                            loss = Some(
                                train_epoch(
                                    &mut state.model,
                                    &mut state.optimizer,
                                    data,
                                    alpha,
                                    &config.prior,
                                    model_cfg,
                                    train_cfg,
                                    &mut rng,
                                )
                                .map_err(fail)?,
                            );
                        }
                    }
                    let eval = evaluate(&state.model, data, model_cfg).map_err(fail)?;
                    if active[i] {
                        state.upload = Some(summarize_posterior(&eval.mu, &eval.sigma));
                    }
                    let labels = data.graph.labels();
                    let metric = |mask: &[bool]| evaluate_metric(config.metric, &eval.logits, labels, mask).ok();
                    Ok(RoundRecord {
                        round,
                        client: i,
                        participated: active[i],
                        loss,
                        val: metric(&data.masks.val),
                        test: metric(&data.masks.test),
                    })
                })
                .collect()
        });
        self.uploaders = participants;
        results.into_iter().collect()
    }

    /// Similarity state of the current uploads without federating.
    pub fn current_similarity(&self) -> Result<Option<SimilarityState>> {
        let uploads = self.uploads();
        if uploads.is_empty() {
            return Ok(None);
        }
        Ok(Some(SimilarityState::compute(&uploads, self.config.js_method, self.config.tau)?))
    }

    pub fn into_models(self) -> Vec<ClientModel> {
        self.clients.into_iter().map(|c| c.model).collect()
    }
}

fn client_mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs all rounds for one seed; returns the report and the final models.
pub fn run_seed(config: &ExperimentConfig, shards: &[ClientData], seed: u64) -> Result<(SeedReport, Vec<ClientModel>)> {
    let start = Instant::now();
    let mut sim = Simulation::new(config, shards, seed)?;
    let mut records = Vec::new();
    let mut round_val = Vec::new();
    let mut round_test = Vec::new();
    for _ in 0..config.rounds {
        let recs = sim.run_round()?;
        round_val.push(client_mean(recs.iter().map(|r| r.val)));
        round_test.push(client_mean(recs.iter().map(|r| r.test)));
        log::info!(
            "seed {seed} round {}: val {:.4} test {:.4}",
            sim.round(),
            round_val.last().unwrap(),
            round_test.last().unwrap()
        );
        records.extend(recs);
    }
    let best = round_val
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        });
    let similarity = if config.method == Method::Fediih {
        sim.current_similarity()?
    } else {
        None
    };
    let report = SeedReport {
        seed,
        best_round: best.map(|(i, _)| i + 1),
        best_val: best.map_or(f64::NAN, |(_, v)| v),
        best_test: best.map_or(f64::NAN, |(i, _)| round_test[i]),
        records,
        round_val,
        round_test,
        server_calls: sim.server_calls(),
        similarity,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, sim.into_models()))
}

/// Reports plus the final client models of every seed.
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub models: Vec<Vec<ClientModel>>,
}

pub fn run_prepared(config: &ExperimentConfig, prepared: &Prepared) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let mut seeds = Vec::new();
    let mut models = Vec::new();
    for &seed in &config.seeds {
        let (report, m) = run_seed(config, &prepared.shards, seed)?;
        seeds.push(report);
        models.push(m);
    }
    let (test_mean, test_std) = mean_std(&seeds.iter().map(|s| s.best_test).collect::<Vec<_>>());
    Ok(ExperimentOutput {
        report: MetricsReport {
            config: config.clone(),
            seeds,
            test_mean,
            test_std,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        models,
    })
}

/// Prepares the data and runs every configured seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    let prepared = prepare(config)?;
    Ok(run_prepared(config, &prepared)?.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub val: Option<f64>,
    pub test: Option<f64>,
}

/// Evaluates saved models (one per shard) with the configured metric.
pub fn evaluate_clients(
    config: &ExperimentConfig,
    shards: &[ClientData],
    models: &[ClientModel],
) -> Result<Vec<ClientMetrics>> {
    if shards.len() != models.len() {
        return Err(Error::Config(format!("{} models for {} shards", models.len(), shards.len())));
    }
    let model_cfg = config.model_config();
    shards
        .iter()
        .zip(models)
        .enumerate()
        .map(|(i, (data, model))| {
            let eval = evaluate(model, data, &model_cfg).map_err(|source| Error::ClientFailed { client: i, source })?;
            let labels = data.graph.labels();
            let metric = |mask: &[bool]| evaluate_metric(config.metric, &eval.logits, labels, mask).ok();
            Ok(ClientMetrics {
                client: i,
                val: metric(&data.masks.val),
                test: metric(&data.masks.test),
            })
        })
        .collect()
}
