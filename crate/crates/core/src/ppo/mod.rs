//! Reward shaping and recurrent proximal policy optimisation.
//!
//! Rollout workers only read parameters; updates own them. The two phases
//! alternate and never overlap.

mod gae;
mod optim;
mod reward;
mod rollout;
mod train;
mod update;

use std::path::PathBuf;

use thiserror::Error;

pub use gae::{compute_gae, normalize_advantages};
pub use optim::{clip_grad_norm, global_norm, Adam};
pub use reward::{step_reward, RewardConfig};
pub use rollout::{
    collect_rollouts, worker_threads, CompletedEpisode, EnvRollout, EnvSpec, NavEnv, RolloutBuffer, StepOutcome,
};
pub use train::{annealed_lr, checkpoint_name, train, MetricsRow, TrainOutcome, TrainSetup, METRICS_FILE, METRICS_HEADER};
pub use update::{block_loss, compute_targets, ppo_update, LossParts, Targets, TrainConfig, UpdateStats};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite training signal: {0}")]
    NonFinite(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}
