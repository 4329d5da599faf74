//! AdamW with a warmup/linear-decay schedule, global-norm clipping,
//! adversarial input perturbation, checkpoints and the training loop.
//!
//! Every random draw of a run is derived from the seed and the update
//! index, so a resumed run replays exactly what an uninterrupted one does.

mod ablation;
mod checkpoint;
mod flag;
mod optim;
mod trainer;

pub use ablation::{ablation_csv, check_ordering, mad, median, run_ablation, AblationConfig, AblationRow, Variant, VARIANTS};
pub use checkpoint::Checkpoint;
pub use flag::{flag_augment, loss_and_gradients, FlagConfig, StepOutput};
pub use optim::{adamw_step, clip_gradients, global_norm, lr_at, OptimConfig, OptimState};
pub use trainer::{
    config_hash, evaluate, resume, run_files, train, MetricRow, TrainConfig, TrainOutcome, BEST_CHECKPOINT,
    LAST_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};

#[cfg(test)]
mod tests;
