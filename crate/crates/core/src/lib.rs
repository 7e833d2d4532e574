//! Federated node classification with disentangled graph encoders and
//! similarity-weighted, per-factor parameter sharing.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these range checks

pub mod client;
pub mod encoder;
pub mod graph;
pub mod harness;
pub mod partition;
pub mod server;
pub mod tensor;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Partition(#[from] partition::PartitionError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Client(#[from] client::ClientError),
    #[error(transparent)]
    Server(#[from] server::ServerError),
    #[error(transparent)]
    Metric(#[from] harness::MetricError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("client {client} failed: {source}")]
    ClientFailed {
        client: usize,
        #[source]
        source: client::ClientError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use client::{ClientModel, ModelConfig, TrainConfig};
pub use graph::GraphData;
pub use harness::{ExperimentConfig, MetricsReport};
