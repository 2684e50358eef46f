//! Downstream evaluation of frozen embeddings, plus synthetic tasks.

pub mod kmeans;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod synthetic;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub use kmeans::{cluster_eval, kmeans, ClusterRun, KMeansResult};
pub use metrics::{accuracy, ari, macro_f1, micro_f1, nmi};
pub use probe::{linear_probe, ProbeConfig, ProbeKind, ProbeRun};
pub use report::EvalReport;
