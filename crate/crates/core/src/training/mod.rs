//! Optimization: Rectified Adam, two-tailed weight averaging, checkpoints
//! and the restartable training loop.

mod checkpoint;
mod radam;
mod trainer;
mod tta;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use radam::{branch_at, radam_step, rectifier, rho_inf, rho_t, RAdamBranch, RAdamState};
pub use trainer::{train, Control, MetricsRecord, StepInfo, TrainConfig, TrainObserver, TrainOutcome};
pub use tta::{tta_evaluate_and_swap, tta_update, Tail, TtaState};
