//! Synthetic data, the training loop and the placement / output-token sweeps.

mod dataset;
mod optim;
mod sweep;
mod train;

pub use dataset::{generate_dataset, separability, Dataset, SyntheticDatasetSpec, MAX_PATTERNS};
pub use optim::{Adam, AdamConfig};
pub use sweep::{
    eval_variable_resolution, sweep_placement, sweep_tokens, write_sweep_csv, SweepKind, SweepRow,
    VariableResolutionReport,
};
pub use train::{evaluate, train, train_model, EvalPoint, RunStatus, TrainOutcome, TrainReport, TrainSpec};
