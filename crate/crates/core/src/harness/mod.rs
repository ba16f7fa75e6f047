//! Training, evaluation, seeding, metrics, and checkpointing.

pub mod buffers;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod rundir;
pub mod seed;
pub mod train;

use std::path::PathBuf;

pub use buffers::{ReplayBuffer, RolloutBuffer, Transition};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{Algorithm, FieldError, PpoConfig, RunConfig, SacConfig};
pub use eval::{embedding_style_gap, evaluate, render_states, style_gap, EvalSummary, StyleGap};
pub use metrics::{MetricsRecord, MetricsWriter, Table, UpdateRecord, METRICS_COLUMNS, UPDATE_COLUMNS};
pub use model::{Model, Net};
pub use rundir::{list_checkpoints, load_latest, read_config, read_eval, write_eval, EvalFile};
pub use seed::{seed_everything, Seeds, STREAMS};
pub use train::{train, RunOutput};

use crate::agents::AgentError;
use crate::envs::EnvError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<FieldError>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {what} at timestep {timestep}; snapshot written to {}", snapshot.display())]
    NonFinite {
        timestep: u64,
        what: String,
        snapshot: PathBuf,
    },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Invalid(String),
}
