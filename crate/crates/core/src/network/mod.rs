//! Semantic encoder and conditional denoiser (small transformers), the
//! composite training objective, optimizers and checkpoints.

mod checkpoint;
mod losses;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use losses::{loss_foot, loss_pos, loss_simple, loss_vel, tape_loss_foot, tape_loss_pos, tape_loss_simple, tape_loss_vel};
pub use model::{sinusoidal_embedding, Dims, FeatureNorm, Model, Tensor};
pub use train::{
    gradient_check, loss_total, FootContacts, GradCheckReport, LossBreakdown, OptimizerKind, StepReport, TrainConfig,
    TrainSample, Trainer,
};
