use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::vocab::SPECIAL_TOKENS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Size of the learned position table.
    pub max_positions: usize,
    pub dropout: f32,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            vocab: 1000,
            max_positions: 512,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn intermediate(&self) -> usize {
        4 * self.hidden
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.hidden == 0 || self.heads == 0 {
            return bad("hidden size and head count must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab < SPECIAL_TOKENS.len() {
            return bad(format!("vocab {} smaller than the special tokens", self.vocab));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Sequence shape of the two pre-training phases at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn seq_len(self) -> usize {
        match self {
            Phase::One => 128,
            Phase::Two => 512,
        }
    }

    pub fn max_predictions(self) -> usize {
        match self {
            Phase::One => 20,
            Phase::Two => 80,
        }
    }
}
