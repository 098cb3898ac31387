//! The segmentation network, its checkpoint format and inference entry
//! points.

mod checkpoint;
mod config;
mod layers;
mod model;

pub use checkpoint::{
    config_difference, ensure_same_config, load_checkpoint, read_checkpoint_config, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use config::{AvailabilityMask, ModelConfig};
pub use model::{Branches, DcSegModel, TrainingForward, TEMPERATURE_PARAM};
