//! Optimizer, learning-rate schedule, training loops and checkpoints.

pub mod adam;
pub mod check;
pub mod checkpoint;
pub mod finetune;
pub mod pretrain;
pub mod schedule;
pub mod step;

pub use adam::{adam_step, AdamConfig, Moments, OptimState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use finetune::{finetune, FinetuneConfig, FinetuneOutcome};
pub use pretrain::{init_model, pretrain, PretrainConfig};
pub use schedule::Schedule;
pub use step::{batch_gradients, batch_loss, BatchGradients, BatchStats};
pub use check::{full_loss_gradcheck, tiny_generator, tiny_model_config};
