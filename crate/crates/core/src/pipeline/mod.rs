//! Training, evaluation, comparison, checkpoints, gradient checks and the fusion benchmark.

mod bench;
mod checkpoint;
mod compare;
mod config;
pub mod gradcheck;
mod model;
mod train;

pub use bench::{bench_fusion, bench_table, median, percentile, BenchRow, MIN_REPS};
pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, payload_digest, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use compare::{compare, CompareRun, Comparison};
pub use config::{TrainConfig, RECIPE};
pub use model::{argmax_labels, Dataset, ForwardVars, Model, PromptSource, SceneInputs};
pub use train::{
    evaluate, is_fusion_param, strategy_uses, train, train_steps, EpochLog, EvalOptions,
    EvalReport, SceneResult,
};
