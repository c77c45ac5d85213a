//! Offline pretraining and reset-free online fine-tuning on low-dimensional
//! state features.

mod adam;
mod agent;
mod buffer;
mod features;
mod mlp;
mod moka;
mod train;

pub use adam::{clip_norm, Adam};
pub use agent::{
    actor_loss, bc_loss, critic_loss, ActorBatch, Agent, CriticBatch, Hyperparams, UpdateStats, CRITIC_IN,
};
pub use buffer::{absorbing_value, episode_transitions, ReplayBuffer, Ring, Transition};
pub use features::{observe, OBS_DIM, OFFSET_SCALE};
pub use mlp::{DimensionError, Mlp, Trace};
pub use moka::{moka_executor, MokaOutcome};
pub use train::{
    demo_buffer, eval_episode, evaluate, finetune_online, generate_demo_set, pretrain_offline, CurvePoint, DemoCounts,
    Env, Trainer, CHECKPOINT_VERSION, EVAL_EPISODE_BASE, ONLINE_EPISODE_BASE,
};

use crate::geometry::GeometryError;
use crate::reward::RewardError;

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("replay buffer has no offline transitions")]
    EmptyBuffer,
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("waypoint sequence is empty")]
    EmptySequence,
    #[error("projection cannot be inverted")]
    NonInvertibleProjection,
}
