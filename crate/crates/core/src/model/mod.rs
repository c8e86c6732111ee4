//! BERT-style encoder, optimizers and parameter accounting.

mod bert;
pub mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use bert::{BertMini, Forward, ForwardOptions, LossAndGrads};
pub use bert::hash_tensors;
pub use config::{ModelConfig, Phase};
pub use optim::{trust_ratio, Lamb, Optimizer, Sgd, LAMB_MAX_RATIO};

use crate::tensor::{DType, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Embedding,
    Attention,
    Intermediate,
    Output,
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Embedding,
        ParamGroup::Attention,
        ParamGroup::Intermediate,
        ParamGroup::Output,
        ParamGroup::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Attention => "attention",
            ParamGroup::Intermediate => "intermediate",
            ParamGroup::Output => "output",
            ParamGroup::Other => "other",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GroupStats {
    pub params: usize,
    pub grad_bytes: usize,
}

/// Parameter count and gradient footprint per layer group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamGroupReport {
    pub dtype: DType,
    pub groups: BTreeMap<ParamGroup, GroupStats>,
}

impl ParamGroupReport {
    pub fn total_params(&self) -> usize {
        self.groups.values().map(|g| g.params).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.groups.values().map(|g| g.grad_bytes).sum()
    }

    pub fn get(&self, g: ParamGroup) -> GroupStats {
        self.groups.get(&g).copied().unwrap_or_default()
    }
}

pub fn param_group_report(model: &BertMini, dtype: DType) -> ParamGroupReport {
    let mut groups: BTreeMap<ParamGroup, GroupStats> =
        ParamGroup::ALL.iter().map(|&g| (g, GroupStats::default())).collect();
    for (t, g) in model.tensors().iter().zip(model.param_groups()) {
        let s = groups.get_mut(g).expect("all groups present");
        s.params += t.numel();
        s.grad_bytes += t.numel() * dtype.size_bytes();
    }
    ParamGroupReport { dtype, groups }
}
