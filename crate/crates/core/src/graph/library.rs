//! Hand-written graphs and kernels used by the model and the benchmarks.

use super::{Attrs, DTypeTag, ExprGraph, FusedKernel, Instr, OpKind, Src};
use crate::tensor::kernels::{GELU_A, GELU_B, GELU_C};

fn ins(kind: OpKind, args: &[usize], attrs: Attrs) -> Instr {
    Instr {
        kind,
        args: args.to_vec(),
        attrs,
        dtype: DTypeTag::Unassigned,
    }
}

/// Lay a register program out as an unfused graph, one node per instruction.
fn program_graph(arity: usize, body: &[Instr], outputs: &[usize]) -> ExprGraph {
    let mut g = ExprGraph::new();
    for _ in 0..arity {
        g.add_input(DTypeTag::Unassigned);
    }
    let src = |r: usize| {
        if r < arity {
            Src::Input(r)
        } else {
            Src::Node(r - arity)
        }
    };
    for i in body {
        let args: Vec<Src> = i.args.iter().map(|&r| src(r)).collect();
        g.push(i.kind, &args, i.attrs.clone()).expect("library program is well formed");
    }
    let outs: Vec<Src> = outputs.iter().map(|&r| src(r)).collect();
    g.set_outputs(&outs).expect("outputs exist");
    g
}

fn gelu_body() -> Vec<Instr> {
    use OpKind::*;
    let tanh1 = Attrs {
        offset: Some(1.0),
        ..Attrs::default()
    };
    vec![
        ins(Pow, &[0], Attrs::k(3.0)),
        ins(ScalarMul, &[1], Attrs::k(GELU_C)),
        ins(Add, &[0, 2], Attrs::default()),
        ins(ScalarMul, &[3], Attrs::k(GELU_B)),
        ins(Tanh, &[4], tanh1),
        ins(Mul, &[0, 5], Attrs::default()),
        ins(ScalarMul, &[6], Attrs::k(GELU_A)),
    ]
}

/// The seven-step tanh GELU:
/// x³, c·f, x+f, b·f, tanh(f)+1, x·f, a·f.
pub fn build_gelu_unfused() -> ExprGraph {
    program_graph(1, &gelu_body(), &[7])
}

fn layer_norm_body(eps: f32) -> Vec<Instr> {
    use OpKind::*;
    vec![
        ins(Mean, &[0], Attrs::rowwise()),
        ins(Sub, &[0, 1], Attrs::default()),
        ins(Mul, &[2, 2], Attrs::default()),
        ins(Mean, &[3], Attrs::rowwise()),
        ins(AddScalar, &[4], Attrs::k(eps)),
        ins(Pow, &[5], Attrs::k(-0.5)),
        ins(Mul, &[2, 6], Attrs::default()),
    ]
}

/// Layer normalisation over the last axis as a chain of primitive nodes.
pub fn build_layer_norm_unfused(eps: f32) -> ExprGraph {
    program_graph(1, &layer_norm_body(eps), &[7])
}

/// Layer normalisation as one row-structured kernel.
pub fn fused_layer_norm(eps: f32) -> FusedKernel {
    FusedKernel {
        name: "layer_norm".into(),
        arity: 1,
        body: layer_norm_body(eps),
        outputs: vec![7],
    }
}

/// Hyper-parameters of one Adam-moment update at step `step` (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            step: 1,
        }
    }
}

fn optimizer_body(p: &AdamParams) -> Vec<Instr> {
    use OpKind::*;
    let t = p.step.max(1) as i32;
    let c1 = 1.0 / (1.0 - p.beta1.powi(t));
    let c2 = 1.0 / (1.0 - p.beta2.powi(t));
    // registers: 0 w, 1 g, 2 m, 3 v
    vec![
        ins(ScalarMul, &[2], Attrs::k(p.beta1)),      // 4
        ins(ScalarMul, &[1], Attrs::k(1.0 - p.beta1)), // 5
        ins(Add, &[4, 5], Attrs::default()),          // 6  m'
        ins(ScalarMul, &[3], Attrs::k(p.beta2)),      // 7
        ins(Mul, &[1, 1], Attrs::default()),          // 8
        ins(ScalarMul, &[8], Attrs::k(1.0 - p.beta2)), // 9
        ins(Add, &[7, 9], Attrs::default()),          // 10 v'
        ins(ScalarMul, &[6], Attrs::k(c1)),           // 11 m̂
        ins(ScalarMul, &[10], Attrs::k(c2)),          // 12 v̂
        ins(Sqrt, &[12], Attrs::default()),           // 13
        ins(AddScalar, &[13], Attrs::k(p.eps)),       // 14
        ins(Div, &[11, 14], Attrs::default()),        // 15
        ins(ScalarMul, &[0], Attrs::k(p.weight_decay)), // 16
        ins(Add, &[15, 16], Attrs::default()),        // 17 u
    ]
}

const OPT_OUTPUTS: [usize; 3] = [6, 10, 17];

/// Moment update and raw update direction as separate nodes.
/// Inputs `(w, g, m, v)`, outputs `(m', v', u)` with
/// `u = m̂ / (√v̂ + ε) + λ·w`.
pub fn build_optimizer_step_unfused(p: &AdamParams) -> ExprGraph {
    program_graph(4, &optimizer_body(p), &OPT_OUTPUTS)
}

/// The same update as a single kernel.
pub fn fused_optimizer_step(p: &AdamParams) -> FusedKernel {
    FusedKernel {
        name: "optimizer_step".into(),
        arity: 4,
        body: optimizer_body(p),
        outputs: OPT_OUTPUTS.to_vec(),
    }
}
