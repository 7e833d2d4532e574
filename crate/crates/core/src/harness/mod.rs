mod checkpoint;
mod config;
mod export;
mod ground_truth;
mod metrics;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex, TensorEntry};
pub use config::{DatasetConfig, ExperimentConfig, Method};
pub use export::{export_report, matrix_csv, parse_matrix_csv, read_report, summary_csv, to_jsonl, write_similarity};
pub use ground_truth::{ground_truth_similarity, shard_gaussian};
pub use metrics::{accuracy, auc, evaluate_metric, mean_std, positive_scores, Metric, MetricError};
pub use run::{
    evaluate_clients, load_dataset, partition_graph, prepare, ClientMetrics, run_experiment, run_prepared, run_seed, stream_seed, ExperimentOutput,
    MetricsReport, Prepared, RoundRecord, SeedReport, Simulation,
};
