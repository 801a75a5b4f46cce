//! Training with random-step teacher forcing and three-step autoregressive
//! inference.

mod checkpoint;
mod infer;
mod model;
mod optim;
mod train;

pub use checkpoint::{
    load_checkpoint, load_optimizer_state, read_meta, save_checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use infer::{infer, infer_with_order, ConditionRecord, InferConfig, InferOutput, StepTrace};
pub use model::{ModelConfig, NextViewModel, Precision};
pub use optim::{cosine_restart_lr, AdamW, AdamWConfig};
pub use train::{
    batch_loss, build_example, checkpoint_dir, collate, evaluate_loss, ConditionView,
    ExampleBatch, LogRecord, LossOutput, Provenance, StepReport, TrainConfig, TrainExample,
    Trainer,
};
