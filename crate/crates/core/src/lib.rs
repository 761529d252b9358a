//! SmartSense: context-aware next-action recommendation for smart homes.
//!
//! A two-level queried transformer encodes each action from its device,
//! control and time embeddings, then summarizes the action history with a
//! query built from the target's day and hour. A routine regularizer pulls
//! together devices that users group into routines.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the type for common use.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use data::{ActionEvent, Dataset, Instance, Manifest, Routine, Session};
pub use error::{Error, Result};
pub use eval::{EvalReport, PopBaseline};
pub use model::{Ablations, ModelConfig, ModelParams};
pub use scalar::Scalar;
pub use tensor::{Matrix, Mode};
pub use train::{train, TrainSettings};
pub use vocab::Vocabulary;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Params64 = ModelParams<f64>;
pub type Params32 = ModelParams<f32>;
