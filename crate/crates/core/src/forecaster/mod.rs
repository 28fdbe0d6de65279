//! Base forecaster, the combined scoring path and the training loop.

mod checkpoint;
mod config;
mod model;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader,
    ParamEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{GammaMode, TrainConfig};
pub use model::{BaseModel, Model, Prepared, QueryParts};
pub use train::{
    batch_losses, fit, make_batches, Batch, EpochLog, LossTerms, TrainContext, TrainLog, CLIP_NORM,
};
