//! Checkpoints, warm-up across days and the key-value inference path.

mod checkpoint;
mod export;
mod warmup;

pub use checkpoint::{
    Checkpoint, GroupData, NamedTensor, OptimizerSlots, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use export::{export_inference, InferenceTable};
pub use warmup::{load_warmup, Warmup, WarmupMask};
