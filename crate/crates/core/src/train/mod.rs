pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use loss::{accuracy, loss, mae, LossKind};
pub use optim::{adamw_step, sgd_step, AdamState, Optimizer, OptimizerConfig};
pub use trainer::{
    clip_gradients, collate, evaluate, gate_diagnostics, train, write_history_csv, EpochRecord, Sample, TrainConfig, TrainReport,
};
