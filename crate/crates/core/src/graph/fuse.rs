use std::collections::HashMap;
use std::sync::Arc;

use super::{ExprGraph, FusedKernel, Instr, Node, Op, Src};

fn fusable(n: &Node) -> bool {
    matches!(n.op, Op::Prim(k) if k.is_elementwise())
}

/// Collapse maximal single-consumer trees of elementwise nodes into fused
/// kernels. Anything that is not elementwise is a barrier, as is a node read
/// by more than one consumer or exported as a graph output.
pub fn fuse_elementwise(g: &ExprGraph) -> ExprGraph {
    let uses = g.use_counts();
    let exported: Vec<bool> = {
        let mut e = vec![false; g.len()];
        for s in g.outputs() {
            if let Src::Node(j) = s {
                e[*j] = true;
            }
        }
        e
    };
    // group root for each node absorbed into a fusion group
    let mut root_of: Vec<Option<usize>> = vec![None; g.len()];
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for r in (0..g.len()).rev() {
        if root_of[r].is_some() || !fusable(g.node(r)) {
            continue;
        }
        let mut members = vec![r];
        let mut stack = vec![r];
        while let Some(v) = stack.pop() {
            for s in &g.node(v).inputs {
                if let Src::Node(u) = *s {
                    let absorb = fusable(g.node(u))
                        && uses[u] == 1
                        && !exported[u]
                        && root_of[u].is_none()
                        && !members.contains(&u);
                    if absorb {
                        members.push(u);
                        stack.push(u);
                    }
                }
            }
        }
        if members.len() > 1 {
            members.sort_unstable();
            for &m in &members {
                root_of[m] = Some(r);
            }
            groups.insert(r, members);
        }
    }

    let mut nodes = Vec::new();
    let mut remap: Vec<Option<Src>> = vec![None; g.len()];
    let map = |s: Src, remap: &[Option<Src>]| match s {
        Src::Input(_) => s,
        Src::Node(j) => remap[j].expect("operand emitted before use"),
    };
    let mut fused_count = 0;
    for (i, node) in g.nodes().iter().enumerate() {
        match root_of[i] {
            Some(r) if r != i => continue,
            Some(_) => {
                let members = &groups[&i];
                let (kernel, ext) = build_kernel(g, members, fused_count);
                fused_count += 1;
                let inputs: Vec<Src> = ext.iter().map(|&s| map(s, &remap)).collect();
                nodes.push(Node {
                    op: Op::Fused(Arc::new(kernel)),
                    inputs,
                    attrs: Default::default(),
                    dtype: node.dtype,
                });
            }
            None => {
                let mut n = node.clone();
                n.inputs = n.inputs.iter().map(|&s| map(s, &remap)).collect();
                nodes.push(n);
            }
        }
        remap[i] = Some(Src::Node(nodes.len() - 1));
    }
    let outputs = g.outputs().iter().map(|&s| map(s, &remap)).collect();
    ExprGraph::from_parts(g.inputs().to_vec(), nodes, outputs)
        .expect("fusion preserves well-formedness")
}

/// Body for a fusion group; returns the kernel and its external operands.
fn build_kernel(g: &ExprGraph, members: &[usize], ordinal: usize) -> (FusedKernel, Vec<Src>) {
    let mut ext: Vec<Src> = Vec::new();
    for &m in members {
        for &s in &g.node(m).inputs {
            let internal = matches!(s, Src::Node(j) if members.contains(&j));
            if !internal && !ext.contains(&s) {
                ext.push(s);
            }
        }
    }
    let arity = ext.len();
    let mut reg: HashMap<Src, usize> = ext.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut body = Vec::with_capacity(members.len());
    let mut names = Vec::with_capacity(members.len());
    for &m in members {
        let n = g.node(m);
        let kind = n.kind();
        names.push(kind.name());
        body.push(Instr {
            kind,
            args: n.inputs.iter().map(|s| reg[s]).collect(),
            attrs: n.attrs.clone(),
            dtype: n.dtype,
        });
        reg.insert(Src::Node(m), arity + body.len() - 1);
    }
    let out = arity + body.len() - 1;
    let kernel = FusedKernel {
        name: format!("fused{ordinal}"),
        arity,
        body,
        outputs: vec![out],
    };
    (kernel, ext)
}
