//! Deep Q-learning over agent graphs: replay, exploration, losses,
//! training loop and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod network;
mod replay;
mod train;

pub use checkpoint::{load_checkpoint, restore_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{epsilon_at, Algorithm, BackboneKind, LossMode, NetworkConfig, TrainConfig};
pub use loss::{compute_losses, LossGraph, LossStats, LossWeights, PreparedBatch};
pub use network::{forward_pipeline, Backbone, GraphBatch, PipelineOutput, QNetwork, StepInput};
pub use replay::{ReplayBuffer, Transition};
pub use train::{run_training, select_actions, EpisodeRecord, Policy, Trainer};
