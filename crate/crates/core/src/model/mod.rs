//! Two-level queried transformer encoder model.

pub mod analysis;
pub mod config;
pub mod encoder;
pub mod params;
pub mod qte;

pub use analysis::{embedding_similarity, export_action_attention, hour_similarity_by_gap, sequence_attention_weights};
pub use config::{Ablations, ModelConfig};
pub use encoder::{encode_action, encode_sequence, predict_controls, predict_eval};
pub use params::{LayerWeights, ModelParams, QteWeights};
pub use qte::{query_attention, BlockSettings};
