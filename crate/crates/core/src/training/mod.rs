//! Optimization: availability sampling, loss assembly, Adam, and the
//! checkpointed training loop.

mod adam;
mod config;
mod run;
mod sampling;
mod step;

pub use adam::Adam;
pub use config::{LossSwitches, LossTerm, TrainConfig};
pub use sampling::{marginal_availability, mask_probability, sample_availability};
pub use step::{build_loss, train_step, LossGraph, StepReport, TrainBatch, TrainState};
pub use run::{
    checkpoint_path, initial_state, latest_checkpoint, load_state, run_ablation_matrix, run_training, RunOutputs,
    FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};
