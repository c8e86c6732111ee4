use std::collections::HashMap;
use std::sync::Arc;

use super::{Attrs, DTypeTag, ExprGraph, GraphError, Node, Op, OpKind, Safety, SafetyTable, Src};

fn cast_node(src: Src, to: DTypeTag) -> Node {
    Node {
        op: Op::Prim(OpKind::Cast),
        inputs: vec![src],
        attrs: Attrs::default(),
        dtype: to,
    }
}

/// Operands that carry values (as opposed to indices or labels).
fn data_operands(kind: OpKind, n: usize) -> usize {
    match kind {
        OpKind::Gather | OpKind::CrossEntropy => 1,
        _ => n,
    }
}

/// Assign a dtype to every node from `table`, inserting explicit casts where
/// an operand's dtype differs from its consumer's. Graph inputs keep their
/// declared dtypes and every output is cast back to the dtype it had before
/// the rewrite.
pub fn amp_rewrite(g: &ExprGraph, table: &SafetyTable) -> Result<ExprGraph, GraphError> {
    for n in g.nodes() {
        if table.get(n.kind()).is_none() {
            return Err(GraphError::UnknownOpKind(n.kind()));
        }
    }
    let inputs: Vec<DTypeTag> = g
        .inputs()
        .iter()
        .map(|t| match t {
            DTypeTag::Unassigned => DTypeTag::F32,
            t => *t,
        })
        .collect();
    let mut nodes: Vec<Node> = Vec::with_capacity(g.len());
    let mut remap: Vec<Src> = Vec::with_capacity(g.len());
    let mut casts: HashMap<(Src, DTypeTag), Src> = HashMap::new();

    let dtype_of = |s: Src, nodes: &[Node]| match s {
        Src::Input(i) => inputs[i],
        Src::Node(j) => nodes[j].dtype,
    };
    let mut cast_to = |s: Src, to: DTypeTag, nodes: &mut Vec<Node>| -> Src {
        if dtype_of(s, nodes) == to {
            return s;
        }
        *casts.entry((s, to)).or_insert_with(|| {
            nodes.push(cast_node(s, to));
            Src::Node(nodes.len() - 1)
        })
    };

    for n in g.nodes() {
        let kind = n.kind();
        let srcs: Vec<Src> = n
            .inputs
            .iter()
            .map(|&s| match s {
                Src::Input(_) => s,
                Src::Node(j) => remap[j],
            })
            .collect();
        if kind == OpKind::Cast {
            // explicit casts keep their target
            let to = match n.dtype {
                DTypeTag::Unassigned => DTypeTag::F32,
                t => t,
            };
            let mut c = n.clone();
            c.inputs = srcs;
            c.dtype = to;
            nodes.push(c);
            remap.push(Src::Node(nodes.len() - 1));
            continue;
        }
        let k = data_operands(kind, srcs.len());
        let target = match table.get(kind).expect("checked above") {
            Safety::Safe => DTypeTag::F16,
            Safety::Dangerous => DTypeTag::F32,
            Safety::Neutral => {
                let halves = srcs[..k]
                    .iter()
                    .filter(|&&s| dtype_of(s, &nodes) == DTypeTag::F16)
                    .count();
                if halves * 2 > k {
                    DTypeTag::F16
                } else {
                    DTypeTag::F32
                }
            }
        };
        let mut new_inputs = Vec::with_capacity(srcs.len());
        for (i, &s) in srcs.iter().enumerate() {
            new_inputs.push(if i < k { cast_to(s, target, &mut nodes) } else { s });
        }
        let mut op = n.op.clone();
        if let Op::Fused(kern) = &n.op {
            let mut kk = (**kern).clone();
            for ins in &mut kk.body {
                ins.dtype = target;
            }
            op = Op::Fused(Arc::new(kk));
        }
        nodes.push(Node {
            op,
            inputs: new_inputs,
            attrs: n.attrs.clone(),
            dtype: target,
        });
        remap.push(Src::Node(nodes.len() - 1));
    }

    let mut outputs = Vec::with_capacity(g.outputs().len());
    for &s in g.outputs() {
        let (mapped, original) = match s {
            Src::Input(i) => (s, inputs[i]),
            Src::Node(j) => (remap[j], g.node(j).dtype),
        };
        let want = match original {
            DTypeTag::Unassigned => DTypeTag::F32,
            t => t,
        };
        outputs.push(cast_to(mapped, want, &mut nodes));
    }
    ExprGraph::from_parts(inputs, nodes, outputs)
}
