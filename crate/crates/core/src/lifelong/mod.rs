//! Per-task modulator sets, task ordering, checkpoints and the sequential
//! training harness.

mod checkpoint;
mod modset;
mod order;
mod registry;
mod task;
mod train;

pub use checkpoint::{decode, encode, load_modulators, predicted_size, save_modulators, FORMAT_VERSION, MAGIC};
pub use modset::{LayerModulator, LayerVars, ModulatorSet, ModulatorVars};
pub use order::{order_tasks, DistanceMatrix};
pub use registry::{validate_task_id, Registry, CHECKPOINT_EXT};
pub use task::TaskSpec;
pub use train::{
    fresh_modulators, generate_for_task, generate_with, run_sequence, train_task, train_task_observed, Adam, StepLog,
    TrainConfig, TrainLog,
};
