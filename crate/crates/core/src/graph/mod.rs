//! Expression-graph IR with elementwise fusion and mixed-precision rewriting.
//!
//! Graph inputs live in their own namespace (`$i`) so that the node list only
//! holds executable operations. Every node refers to earlier nodes only,
//! which keeps graphs acyclic by construction.

mod amp;
mod fuse;
mod interp;
mod library;
mod safety;
mod text;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use amp::amp_rewrite;
pub use fuse::fuse_elementwise;
pub use interp::{interpret, Buffer, Value};
pub use library::{
    build_gelu_unfused, build_layer_norm_unfused, build_optimizer_step_unfused, fused_layer_norm,
    fused_optimizer_step, AdamParams,
};
pub use safety::{OpKind, Safety, SafetyTable};

use crate::tensor::DType;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} refers to {src}, which does not precede it")]
    ForwardReference { node: usize, src: Src },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: OpKind,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch { op: OpKind, shapes: Vec<Vec<usize>> },
    #[error("no safety entry for op kind `{0}`")]
    UnknownOpKind(OpKind),
    #[error("graph expects {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("{op} is missing attribute `{attr}`")]
    MissingAttr { op: OpKind, attr: &'static str },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Per-node dtype annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DTypeTag {
    F32,
    F16,
    #[default]
    Unassigned,
}

impl DTypeTag {
    /// The dtype a node actually computes in. Unassigned nodes run in FP32.
    pub fn resolve(self) -> DType {
        match self {
            DTypeTag::F16 => DType::F16,
            _ => DType::F32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DTypeTag::F32 => "f32",
            DTypeTag::F16 => "f16",
            DTypeTag::Unassigned => "any",
        }
    }

    pub fn parse(s: &str) -> Option<DTypeTag> {
        match s {
            "f32" => Some(DTypeTag::F32),
            "f16" => Some(DTypeTag::F16),
            "any" => Some(DTypeTag::Unassigned),
            _ => None,
        }
    }
}

impl From<DType> for DTypeTag {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => DTypeTag::F32,
            DType::F16 => DTypeTag::F16,
        }
    }
}

impl fmt::Display for DTypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Operand reference: a graph input or an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Src {
    Input(usize),
    Node(usize),
}

impl fmt::Display for Src {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Src::Input(i) => write!(f, "${i}"),
            Src::Node(i) => write!(f, "%{i}"),
        }
    }
}

/// Static operator attributes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Attrs {
    /// Multiplier for `scalar_mul`, addend for `add_scalar`, exponent for
    /// `pow`, rate for `dropout`.
    pub k: Option<f32>,
    /// Constant added after `tanh`.
    pub offset: Option<f32>,
    pub eps: Option<f32>,
    /// `sum`/`mean` reduce only the last axis, keeping it with extent one.
    pub rowwise: bool,
    pub axes: Option<Vec<usize>>,
    pub shape: Option<Vec<usize>>,
}

impl Attrs {
    pub fn k(k: f32) -> Attrs {
        Attrs {
            k: Some(k),
            ..Attrs::default()
        }
    }

    pub fn rowwise() -> Attrs {
        Attrs {
            rowwise: true,
            ..Attrs::default()
        }
    }
}

/// One instruction of a fused kernel. Registers `0..arity` hold the kernel
/// inputs; instruction `i` writes register `arity + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instr {
    pub kind: OpKind,
    pub args: Vec<usize>,
    pub attrs: Attrs,
    pub dtype: DTypeTag,
}

/// A straight-line program run as a single interpreter operation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedKernel {
    pub name: String,
    pub arity: usize,
    pub body: Vec<Instr>,
    /// Registers returned by the kernel.
    pub outputs: Vec<usize>,
}

impl FusedKernel {
    /// True if some instruction reduces over the last axis, which makes the
    /// kernel row-structured instead of purely elementwise.
    pub fn has_row_ops(&self) -> bool {
        self.body.iter().any(|i| !i.kind.is_elementwise())
    }

    /// Evaluate on FP32 operands of equal length (`row_len` divides it when
    /// the kernel has row reductions).
    pub fn eval(&self, inputs: &[&[f32]], row_len: usize) -> Result<Vec<Vec<f32>>, GraphError> {
        let ops: Vec<interp::Operand> = inputs.iter().map(|s| interp::Operand::F32(s)).collect();
        let n = inputs.first().map_or(0, |s| s.len());
        let out_tags = vec![DTypeTag::F32; self.outputs.len()];
        let bufs = interp::run_kernel(self, &ops, n, row_len, &out_tags)?;
        Ok(bufs.iter().map(Buffer::to_f32).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Prim(OpKind),
    Fused(Arc<FusedKernel>),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Prim(k) => *k,
            Op::Fused(_) => OpKind::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<Src>,
    pub attrs: Attrs,
    pub dtype: DTypeTag,
}

impl Node {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

fn expected_arity(kind: OpKind) -> Option<usize> {
    use OpKind::*;
    Some(match kind {
        Add | Sub | Mul | Div | MatMul | Gather | CrossEntropy => 2,
        Neg | ScalarMul | AddScalar | Pow | Tanh | Exp | Log | Sqrt | Softmax | LayerNorm
        | Gelu | Sum | Mean | Cast | Reshape | Permute | Dropout => 1,
        Fused => return None,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExprGraph {
    inputs: Vec<DTypeTag>,
    nodes: Vec<Node>,
    outputs: Vec<Src>,
}

impl ExprGraph {
    pub fn new() -> ExprGraph {
        ExprGraph::default()
    }

    pub fn add_input(&mut self, dtype: DTypeTag) -> Src {
        self.inputs.push(dtype);
        Src::Input(self.inputs.len() - 1)
    }

    /// Append a primitive op. Inputs must already exist.
    pub fn push(&mut self, kind: OpKind, inputs: &[Src], attrs: Attrs) -> Result<Src, GraphError> {
        if kind == OpKind::Fused {
            return Err(GraphError::Invalid("use push_fused for fused nodes".into()));
        }
        self.push_node(Node {
            op: Op::Prim(kind),
            inputs: inputs.to_vec(),
            attrs,
            dtype: DTypeTag::Unassigned,
        })
    }

    pub fn push_cast(&mut self, src: Src, to: DTypeTag) -> Result<Src, GraphError> {
        self.push_node(Node {
            op: Op::Prim(OpKind::Cast),
            inputs: vec![src],
            attrs: Attrs::default(),
            dtype: to,
        })
    }

    pub fn push_fused(&mut self, kernel: Arc<FusedKernel>, inputs: &[Src]) -> Result<Src, GraphError> {
        self.push_node(Node {
            op: Op::Fused(kernel),
            inputs: inputs.to_vec(),
            attrs: Attrs::default(),
            dtype: DTypeTag::Unassigned,
        })
    }

    pub fn push_node(&mut self, node: Node) -> Result<Src, GraphError> {
        let id = self.nodes.len();
        self.check_node(id, &node)?;
        self.nodes.push(node);
        Ok(Src::Node(id))
    }

    fn check_src(&self, id: usize, src: Src) -> Result<(), GraphError> {
        let ok = match src {
            Src::Input(i) => i < self.inputs.len(),
            Src::Node(j) => j < id,
        };
        if ok {
            Ok(())
        } else {
            Err(GraphError::ForwardReference { node: id, src })
        }
    }

    fn check_node(&self, id: usize, node: &Node) -> Result<(), GraphError> {
        let kind = node.kind();
        let expected = match &node.op {
            Op::Prim(k) => expected_arity(*k).unwrap_or(0),
            Op::Fused(kern) => {
                if kern.outputs.len() != 1 {
                    return Err(GraphError::Invalid(format!(
                        "fused kernel `{}` must have exactly one output inside a graph",
                        kern.name
                    )));
                }
                kern.arity
            }
        };
        if node.inputs.len() != expected {
            return Err(GraphError::Arity {
                op: kind,
                expected,
                got: node.inputs.len(),
            });
        }
        for &s in &node.inputs {
            self.check_src(id, s)?;
        }
        let need = |attr: &'static str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(GraphError::MissingAttr { op: kind, attr })
            }
        };
        match kind {
            OpKind::ScalarMul | OpKind::AddScalar | OpKind::Pow => need("k", node.attrs.k.is_some()),
            OpKind::Permute => need("axes", node.attrs.axes.is_some()),
            OpKind::Reshape => need("shape", node.attrs.shape.is_some()),
            OpKind::Cast => need("dtype", node.dtype != DTypeTag::Unassigned),
            _ => Ok(()),
        }
    }

    pub fn set_outputs(&mut self, outputs: &[Src]) -> Result<(), GraphError> {
        for &s in outputs {
            self.check_src(self.nodes.len(), s)?;
        }
        self.outputs = outputs.to_vec();
        Ok(())
    }

    pub fn inputs(&self) -> &[DTypeTag] {
        &self.inputs
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[Src] {
        &self.outputs
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    /// Number of executable nodes (graph inputs are not counted).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }

    /// Dtype of an operand as declared by the graph.
    pub fn dtype_of(&self, s: Src) -> DTypeTag {
        match s {
            Src::Input(i) => self.inputs[i],
            Src::Node(j) => self.nodes[j].dtype,
        }
    }

    /// Re-run the structural checks on every node.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut prefix = ExprGraph {
            inputs: self.inputs.clone(),
            nodes: Vec::with_capacity(self.nodes.len()),
            outputs: Vec::new(),
        };
        for n in &self.nodes {
            prefix.push_node(n.clone())?;
        }
        prefix.set_outputs(&self.outputs)
    }

    pub(crate) fn from_parts(
        inputs: Vec<DTypeTag>,
        nodes: Vec<Node>,
        outputs: Vec<Src>,
    ) -> Result<ExprGraph, GraphError> {
        let g = ExprGraph {
            inputs,
            nodes,
            outputs,
        };
        g.validate()?;
        Ok(g)
    }

    /// Consumers per node, counting graph outputs as consumers.
    pub fn use_counts(&self) -> Vec<usize> {
        let mut uses = vec![0; self.nodes.len()];
        for n in &self.nodes {
            for s in &n.inputs {
                if let Src::Node(j) = s {
                    uses[*j] += 1;
                }
            }
        }
        for s in &self.outputs {
            if let Src::Node(j) = s {
                uses[*j] += 1;
            }
        }
        uses
    }

    pub fn dump(&self) -> String {
        text::dump(self)
    }

    pub fn load(s: &str) -> Result<ExprGraph, GraphError> {
        text::load(s)
    }
}

impl fmt::Display for ExprGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}
