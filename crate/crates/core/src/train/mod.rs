//! Objective and training loop.

pub mod loss;
pub mod trainer;

pub use loss::{compute_gradients, routine_reg_loss, sample_negatives, total_loss, LossBreakdown};
pub use trainer::{evaluate_params, train, EpochRecord, TrainOutcome, TrainReport, TrainSettings};
