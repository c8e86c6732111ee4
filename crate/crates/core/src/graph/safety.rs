use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Operator kinds shared by the expression IR and the autodiff tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    ScalarMul,
    AddScalar,
    Pow,
    Tanh,
    Exp,
    Log,
    Sqrt,
    MatMul,
    Softmax,
    LayerNorm,
    Gelu,
    CrossEntropy,
    Sum,
    Mean,
    Cast,
    Reshape,
    Permute,
    Gather,
    Dropout,
    Fused,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::Pow,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::MatMul,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Cast,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Gather,
        OpKind::Dropout,
        OpKind::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Pow => "pow",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::MatMul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Cast => "cast",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Gather => "gather",
            OpKind::Dropout => "dropout",
            OpKind::Fused => "fused",
        }
    }

    /// Pointwise ops the fusion pass may merge.
    pub fn is_elementwise(self) -> bool {
        matches!(
            self,
            OpKind::Add
                | OpKind::Sub
                | OpKind::Mul
                | OpKind::Div
                | OpKind::Neg
                | OpKind::ScalarMul
                | OpKind::AddScalar
                | OpKind::Pow
                | OpKind::Tanh
                | OpKind::Exp
                | OpKind::Log
                | OpKind::Sqrt
                | OpKind::Gelu
                | OpKind::Cast
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op kind `{s}`"))
    }
}

/// Numerical safety class of an operator in half precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Safety {
    /// Runs in binary16.
    Safe,
    /// Always runs in FP32.
    Dangerous,
    /// Follows the majority dtype of its inputs, FP32 on ties.
    Neutral,
}

/// Per-op-kind safety classification used by mixed-precision rewriting and
/// the tape's autocast mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyTable {
    entries: BTreeMap<OpKind, Safety>,
}

impl Default for SafetyTable {
    /// Plain arithmetic and matrix products are safe; transcendental ops that
    /// overflow or lose range (pow, log, exp, div, sqrt) and every reduction
    /// are dangerous; data movement and casts are neutral.
    fn default() -> Self {
        use OpKind::*;
        let mut entries = BTreeMap::new();
        for k in [Add, Sub, Mul, Neg, ScalarMul, AddScalar, MatMul, Tanh, Gelu] {
            entries.insert(k, Safety::Safe);
        }
        for k in [
            Pow,
            Log,
            Exp,
            Div,
            Sqrt,
            Softmax,
            LayerNorm,
            CrossEntropy,
            Sum,
            Mean,
        ] {
            entries.insert(k, Safety::Dangerous);
        }
        for k in [Cast, Reshape, Permute, Gather, Dropout, Fused] {
            entries.insert(k, Safety::Neutral);
        }
        SafetyTable { entries }
    }
}

impl SafetyTable {
    pub fn empty() -> Self {
        SafetyTable {
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, kind: OpKind) -> Option<Safety> {
        self.entries.get(&kind).copied()
    }

    pub fn set(&mut self, kind: OpKind, safety: Safety) {
        self.entries.insert(kind, safety);
    }

    pub fn remove(&mut self, kind: OpKind) -> Option<Safety> {
        self.entries.remove(&kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, Safety)> + '_ {
        self.entries.iter().map(|(&k, &s)| (k, s))
    }
}
