//! Actor-critic networks, their objectives, and optimizers.

pub mod dist;
pub mod encoder;
pub mod layers;
pub mod optim;
pub mod ppo;
pub mod sac;
pub mod sar;

use thiserror::Error;

use crate::tensor::TensorError;

pub use dist::{kl_divergence, l_div, Actions, PolicyDist};
pub use encoder::{Encoder, EncoderConfig};
pub use optim::{apply_updates, clip_grad_norm, polyak_update, Adam, AdamConfig};
pub use ppo::{gae, normalize_advantages, ppo_actor_loss, ppo_critic_loss, PpoNet};
pub use sac::{sac_losses, soft_value, td_target, SacBatch, SacHyper, SacLosses, SacNet};
pub use sar::{sar_ppo_losses, PpoBatch, PpoHyper, SarCoefs, SarLossBundle};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("distribution family or arity mismatch")]
    FamilyMismatch,
    #[error("observation shape mismatch: expected [B, {expected:?}], got {got:?}")]
    ObsShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("empty rollout")]
    EmptyRollout,
    #[error("replay buffer holds {size} transitions, batch needs {batch}")]
    BufferTooSmall { size: usize, batch: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("adversarial term requested without a perturbation generator")]
    GeneratorMissing,
    #[error("{0}")]
    Invalid(String),
}
