use serde::{Deserialize, Serialize};

use crate::data::{NUM_DOW, NUM_HOUR_BINS};
use crate::error::{Error, Result};

/// Ablation switches for the three model components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Replace the action encoder with the mean of the four raw embeddings.
    pub act_off: bool,
    /// Query the sequence encoder with a zero vector (mean pooling).
    pub seq_off: bool,
    /// Drop the routine regularizer from the objective.
    pub reg_off: bool,
}

impl Ablations {
    pub const ALL: Ablations = Ablations {
        act_off: true,
        seq_off: true,
        reg_off: true,
    };

    /// Parses `act`, `seq`, `reg` or `all`.
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablations::default();
        match name {
            "act" => a.act_off = true,
            "seq" => a.seq_off = true,
            "reg" => a.reg_off = true,
            "all" => a = Ablations::ALL,
            other => {
                return Err(Error::Usage(format!(
                    "unknown ablation {other:?}; expected act, seq, reg or all"
                )))
            }
        }
        Ok(a)
    }

    pub fn union(self, other: Ablations) -> Ablations {
        Ablations {
            act_off: self.act_off || other.act_off,
            seq_off: self.seq_off || other.seq_off,
            reg_off: self.reg_off || other.reg_off,
        }
    }
}

/// Every hyperparameter of the model and optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub dropout: f64,
    pub num_devices: usize,
    pub num_controls: usize,
    pub num_dow: usize,
    pub num_hour_bins: usize,
    pub layer_norm: bool,
    pub ablations: Ablations,
    pub lambda_reg: f64,
    pub negatives: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub tie_output: bool,
    /// Half-width of the uniform initialization interval.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 50,
            layers: 2,
            heads: 2,
            window: 10,
            dropout: 0.1,
            num_devices: 1,
            num_controls: 1,
            num_dow: NUM_DOW,
            num_hour_bins: NUM_HOUR_BINS,
            layer_norm: true,
            ablations: Ablations::default(),
            lambda_reg: 1.0,
            negatives: 5,
            lr: 0.001,
            l2: 1e-5,
            batch_size: 1024,
            tie_output: false,
            init_scale: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn history_len(&self) -> usize {
        self.window - 1
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 || self.heads == 0 || self.layers == 0 {
            problems.push("d, heads and layers must be positive".to_string());
        } else if self.d % self.heads != 0 {
            problems.push(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.window < 2 {
            problems.push(format!("window = {} must be at least 2", self.window));
        }
        if self.num_devices == 0 || self.num_controls == 0 || self.num_dow == 0 || self.num_hour_bins == 0 {
            problems.push("vocabulary sizes must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout = {} must lie in [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0) || self.l2 < 0.0 || self.lambda_reg < 0.0 || !(self.init_scale > 0.0) {
            problems.push("lr and init_scale must be positive; l2 and lambda_reg non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Whether the routine term contributes to the objective.
    pub fn regularizer_active(&self) -> bool {
        !self.ablations.reg_off && self.lambda_reg > 0.0
    }
}
