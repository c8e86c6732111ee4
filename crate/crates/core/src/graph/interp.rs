use super::{DTypeTag, ExprGraph, FusedKernel, GraphError, Instr, Op, OpKind, Src};
use crate::half;
use crate::tensor::kernels::{
    broadcast_index_map, broadcast_shape, gelu, gemm, layer_norm_rows, permute, pow_scalar,
    softmax_rows,
};

/// Storage for an interpreter value. Binary16 values are kept as raw bits.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F16(Vec<u16>),
}

impl Buffer {
    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Buffer::F32(v) => v.clone(),
            Buffer::F16(h) => {
                let mut out = vec![0f32; h.len()];
                half::decode_slice(h, &mut out);
                out
            }
        }
    }

    fn from_f32(v: Vec<f32>, tag: DTypeTag) -> Buffer {
        match tag {
            DTypeTag::F16 => {
                let mut h = vec![0u16; v.len()];
                half::encode_slice(&v, &mut h);
                Buffer::F16(h)
            }
            _ => Buffer::F32(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Buffer,
}

impl Value {
    pub fn f32(shape: &[usize], data: Vec<f32>) -> Value {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Value {
            shape: shape.to_vec(),
            data: Buffer::F32(data),
        }
    }

    pub fn f16(shape: &[usize], data: &[f32]) -> Value {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Value {
            shape: shape.to_vec(),
            data: Buffer::from_f32(data.to_vec(), DTypeTag::F16),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.to_f32()
    }

    fn tag(&self) -> DTypeTag {
        match self.data {
            Buffer::F32(_) => DTypeTag::F32,
            Buffer::F16(_) => DTypeTag::F16,
        }
    }
}

/// Apply an elementwise op to equal-length operands.
pub(crate) fn apply(kind: OpKind, attrs: &super::Attrs, args: &[&[f32]], out: &mut [f32]) {
    macro_rules! unary {
        ($f:expr) => {{
            let f = $f;
            for (o, &x) in out.iter_mut().zip(args[0]) {
                *o = f(x);
            }
        }};
    }
    macro_rules! binary {
        ($f:expr) => {{
            let f = $f;
            for ((o, &x), &y) in out.iter_mut().zip(args[0]).zip(args[1]) {
                *o = f(x, y);
            }
        }};
    }
    let k = attrs.k.unwrap_or(0.0);
    match kind {
        OpKind::Add => binary!(|x: f32, y: f32| x + y),
        OpKind::Sub => binary!(|x: f32, y: f32| x - y),
        OpKind::Mul => binary!(|x: f32, y: f32| x * y),
        OpKind::Div => binary!(|x: f32, y: f32| x / y),
        OpKind::Neg => unary!(|x: f32| -x),
        OpKind::ScalarMul => unary!(|x: f32| k * x),
        OpKind::AddScalar => unary!(|x: f32| x + k),
        OpKind::Pow => unary!(|x: f32| pow_scalar(x, k)),
        OpKind::Tanh => match attrs.offset {
            Some(c) => unary!(|x: f32| x.tanh() + c),
            None => unary!(f32::tanh),
        },
        OpKind::Exp => unary!(f32::exp),
        OpKind::Log => unary!(f32::ln),
        OpKind::Sqrt => unary!(f32::sqrt),
        OpKind::Gelu => unary!(gelu),
        OpKind::Cast | OpKind::Dropout | OpKind::Reshape => out.copy_from_slice(args[0]),
        other => unreachable!("{other} is not elementwise"),
    }
}

pub(crate) enum Operand<'a> {
    F32(&'a [f32]),
    F16(&'a [u16]),
    /// Broadcast scalar, already in the right precision.
    Scalar(f32),
    /// Fully materialised broadcast operand.
    Owned(Vec<f32>),
}

const BLOCK: usize = 2048;

/// Run a fused kernel over `n` elements in cache-sized blocks.
pub(crate) fn run_kernel(
    kernel: &FusedKernel,
    inputs: &[Operand],
    n: usize,
    row_len: usize,
    out_tags: &[DTypeTag],
) -> Result<Vec<Buffer>, GraphError> {
    if inputs.len() != kernel.arity {
        return Err(GraphError::InputCount {
            expected: kernel.arity,
            got: inputs.len(),
        });
    }
    let rows = kernel.has_row_ops();
    if rows && (row_len == 0 || !n.is_multiple_of(row_len)) {
        return Err(GraphError::Invalid(format!(
            "kernel `{}` needs rows of {row_len} to tile {n} elements",
            kernel.name
        )));
    }
    let block = if rows {
        row_len * (BLOCK / row_len).max(1)
    } else {
        BLOCK
    };
    let nregs = kernel.arity + kernel.body.len();
    let mut reg_tag = Vec::with_capacity(nregs);
    for op in inputs {
        reg_tag.push(match op {
            Operand::F16(_) => DTypeTag::F16,
            _ => DTypeTag::F32,
        });
    }
    reg_tag.extend(kernel.body.iter().map(|i| match i.dtype {
        DTypeTag::F16 => DTypeTag::F16,
        _ => DTypeTag::F32,
    }));
    let mut regs = vec![vec![0f32; block]; nregs];
    let mut scratch = vec![vec![0f32; block]; 2];
    let mut outs: Vec<Buffer> = out_tags
        .iter()
        .map(|t| match t {
            DTypeTag::F16 => Buffer::F16(vec![0; n]),
            _ => Buffer::F32(vec![0.0; n]),
        })
        .collect();

    let mut start = 0;
    while start < n {
        let end = (start + block).min(n);
        let len = end - start;
        for (r, op) in inputs.iter().enumerate() {
            let dst = &mut regs[r][..len];
            match op {
                Operand::F32(s) => dst.copy_from_slice(&s[start..end]),
                Operand::F16(h) => half::decode_slice(&h[start..end], dst),
                Operand::Scalar(v) => dst.fill(*v),
                Operand::Owned(v) => dst.copy_from_slice(&v[start..end]),
            }
        }
        for (i, ins) in kernel.body.iter().enumerate() {
            let dst_reg = kernel.arity + i;
            let (before, after) = regs.split_at_mut(dst_reg);
            let dst = &mut after[0][..len];
            exec_instr(ins, before, &reg_tag, &mut scratch, dst, len, row_len);
        }
        for ((&reg, out), tag) in kernel.outputs.iter().zip(outs.iter_mut()).zip(out_tags) {
            let src = &regs[reg][..len];
            match out {
                Buffer::F32(v) => {
                    v[start..end].copy_from_slice(src);
                    if *tag == DTypeTag::F16 {
                        half::round_slice(&mut v[start..end]);
                    }
                }
                Buffer::F16(h) => half::encode_slice(src, &mut h[start..end]),
            }
        }
        start = end;
    }
    Ok(outs)
}

fn exec_instr(
    ins: &Instr,
    regs: &[Vec<f32>],
    reg_tag: &[DTypeTag],
    scratch: &mut [Vec<f32>],
    dst: &mut [f32],
    len: usize,
    row_len: usize,
) {
    let f16 = ins.dtype == DTypeTag::F16;
    // F16 instructions see their operands through binary16
    let mut args: Vec<&[f32]> = Vec::with_capacity(ins.args.len());
    let mut rounded: Vec<usize> = Vec::new();
    for (slot, &a) in ins.args.iter().enumerate() {
        if f16 && reg_tag[a] != DTypeTag::F16 && ins.kind != OpKind::Cast {
            rounded.push(slot);
        }
    }
    for (k, &slot) in rounded.iter().enumerate() {
        let s = &mut scratch[k][..len];
        s.copy_from_slice(&regs[ins.args[slot]][..len]);
        half::round_slice(s);
    }
    let mut next_scratch = 0;
    for (slot, &a) in ins.args.iter().enumerate() {
        if rounded.contains(&slot) {
            args.push(&scratch[next_scratch][..len]);
            next_scratch += 1;
        } else {
            args.push(&regs[a][..len]);
        }
    }
    if ins.kind.is_elementwise() {
        apply(ins.kind, &ins.attrs, &args, dst);
    } else {
        row_reduce(ins.kind, args[0], dst, row_len);
    }
    if f16 {
        half::round_slice(dst);
    }
}

/// Row reductions inside fused kernels broadcast each row's result back
/// over the row.
fn row_reduce(kind: OpKind, src: &[f32], dst: &mut [f32], row_len: usize) {
    for (row, o) in src.chunks(row_len).zip(dst.chunks_mut(row_len)) {
        let s: f32 = row.iter().sum();
        let v = match kind {
            OpKind::Mean => s / row_len as f32,
            _ => s,
        };
        o.fill(v);
    }
}

fn shape_err(op: OpKind, shapes: &[&[usize]]) -> GraphError {
    GraphError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Execute `g` on `inputs`, returning the graph outputs.
pub fn interpret(g: &ExprGraph, inputs: &[Value]) -> Result<Vec<Value>, GraphError> {
    if inputs.len() != g.inputs().len() {
        return Err(GraphError::InputCount {
            expected: g.inputs().len(),
            got: inputs.len(),
        });
    }
    // free intermediates after their last reader
    let mut last_use = vec![0usize; g.len()];
    for (i, n) in g.nodes().iter().enumerate() {
        for s in &n.inputs {
            if let Src::Node(j) = s {
                last_use[*j] = i;
            }
        }
    }
    for s in g.outputs() {
        if let Src::Node(j) = s {
            last_use[*j] = usize::MAX;
        }
    }
    let mut vals: Vec<Option<Value>> = vec![None; g.len()];
    for (i, node) in g.nodes().iter().enumerate() {
        let args: Vec<&Value> = node
            .inputs
            .iter()
            .map(|s| match s {
                Src::Input(k) => &inputs[*k],
                Src::Node(j) => vals[*j].as_ref().expect("value freed before last use"),
            })
            .collect();
        let v = eval_node(node, &args)?;
        vals[i] = Some(v);
        for s in &node.inputs {
            if let Src::Node(j) = s {
                if last_use[*j] == i {
                    vals[*j] = None;
                }
            }
        }
    }
    Ok(g.outputs()
        .iter()
        .map(|s| match s {
            Src::Input(k) => inputs[*k].clone(),
            Src::Node(j) => vals[*j].clone().expect("output value"),
        })
        .collect())
}

/// Operand data as f32, rounded through binary16 when the node runs in F16.
fn operand_f32(v: &Value, f16: bool) -> Vec<f32> {
    let mut d = v.to_f32();
    if f16 && v.tag() != DTypeTag::F16 {
        half::round_slice(&mut d);
    }
    d
}

fn eval_node(node: &super::Node, args: &[&Value]) -> Result<Value, GraphError> {
    let kind = node.kind();
    let tag = node.dtype;
    let f16 = tag == DTypeTag::F16;
    if let Op::Fused(kernel) = &node.op {
        return eval_fused(kernel, args, tag);
    }
    let out = |shape: Vec<usize>, data: Vec<f32>| Value {
        shape,
        data: Buffer::from_f32(data, tag),
    };
    match kind {
        OpKind::Cast => {
            let d = args[0].to_f32();
            Ok(out(args[0].shape.clone(), d))
        }
        k if k.is_elementwise() => {
            let mut shape = args[0].shape.clone();
            for a in &args[1..] {
                shape = broadcast_shape(&shape, &a.shape)
                    .map_err(|_| shape_err(k, &[&args[0].shape, &a.shape]))?;
            }
            let n: usize = shape.iter().product();
            let data: Vec<Vec<f32>> = args
                .iter()
                .map(|a| {
                    let d = operand_f32(a, f16);
                    if a.shape == shape {
                        d
                    } else {
                        broadcast_index_map(&a.shape, &shape).iter().map(|&i| d[i]).collect()
                    }
                })
                .collect();
            let refs: Vec<&[f32]> = data.iter().map(|v| v.as_slice()).collect();
            let mut o = vec![0f32; n];
            apply(k, &node.attrs, &refs, &mut o);
            Ok(out(shape, o))
        }
        OpKind::Dropout | OpKind::Reshape => {
            let d = operand_f32(args[0], f16);
            let shape = match (&node.attrs.shape, kind) {
                (Some(s), OpKind::Reshape) => {
                    if s.iter().product::<usize>() != d.len() {
                        return Err(shape_err(kind, &[&args[0].shape, s]));
                    }
                    s.clone()
                }
                _ => args[0].shape.clone(),
            };
            Ok(out(shape, d))
        }
        OpKind::Permute => {
            let axes = node.attrs.axes.as_deref().unwrap_or(&[]);
            if axes.len() != args[0].shape.len() {
                return Err(shape_err(kind, &[&args[0].shape, axes]));
            }
            let d = operand_f32(args[0], f16);
            let (p, shape) = permute(&d, &args[0].shape, axes);
            Ok(out(shape, p))
        }
        OpKind::MatMul => {
            let (a, b) = (&args[0].shape, &args[1].shape);
            if a.len() < 2 || b.len() < 2 {
                return Err(shape_err(kind, &[a, b]));
            }
            let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
            let (bk, n) = (b[b.len() - 2], b[b.len() - 1]);
            let lead = &a[..a.len() - 2];
            let shared = b.len() == 2;
            if k != bk || (!shared && &b[..b.len() - 2] != lead) {
                return Err(shape_err(kind, &[a, b]));
            }
            let batch: usize = lead.iter().product();
            let ad = operand_f32(args[0], f16);
            let bd = operand_f32(args[1], f16);
            let mut o = vec![0f32; batch * m * n];
            for bi in 0..batch {
                let bb = if shared { &bd[..] } else { &bd[bi * k * n..(bi + 1) * k * n] };
                gemm(m, k, n, &ad[bi * m * k..(bi + 1) * m * k], false, bb, false, &mut o[bi * m * n..(bi + 1) * m * n]);
            }
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            Ok(out(shape, o))
        }
        OpKind::Softmax => {
            let d = operand_f32(args[0], f16);
            let cols = *args[0].shape.last().unwrap_or(&1);
            Ok(out(args[0].shape.clone(), softmax_rows(&d, cols)))
        }
        OpKind::LayerNorm => {
            let d = operand_f32(args[0], f16);
            let cols = *args[0].shape.last().unwrap_or(&1);
            let eps = node.attrs.eps.unwrap_or(1e-12);
            Ok(out(args[0].shape.clone(), layer_norm_rows(&d, cols, eps).0))
        }
        OpKind::Sum | OpKind::Mean => {
            let d = operand_f32(args[0], f16);
            let mean = kind == OpKind::Mean;
            if node.attrs.rowwise {
                let mut shape = args[0].shape.clone();
                let cols = shape.pop().unwrap_or(1);
                shape.push(1);
                let o = d
                    .chunks(cols)
                    .map(|r| {
                        let s: f32 = r.iter().sum();
                        if mean {
                            s / cols as f32
                        } else {
                            s
                        }
                    })
                    .collect();
                Ok(out(shape, o))
            } else {
                let s: f32 = d.iter().sum();
                Ok(out(vec![], vec![if mean { s / d.len() as f32 } else { s }]))
            }
        }
        OpKind::Gather => {
            let t = &args[0].shape;
            if t.len() != 2 {
                return Err(shape_err(kind, &[t, &args[1].shape]));
            }
            let table = operand_f32(args[0], f16);
            let ids = args[1].to_f32();
            let cols = t[1];
            let mut o = Vec::with_capacity(ids.len() * cols);
            for &id in &ids {
                let r = id as usize;
                if id < 0.0 || r >= t[0] {
                    return Err(GraphError::Invalid(format!("gather index {id} out of range")));
                }
                o.extend_from_slice(&table[r * cols..(r + 1) * cols]);
            }
            Ok(out(vec![ids.len(), cols], o))
        }
        OpKind::CrossEntropy => {
            let s = &args[0].shape;
            let labels = args[1].to_f32();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(shape_err(kind, &[s, &args[1].shape]));
            }
            let p = softmax_rows(&operand_f32(args[0], f16), s[1]);
            let loss = labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -(p[r * s[1] + l as usize].max(f32::MIN_POSITIVE)).ln())
                .sum::<f32>()
                / labels.len() as f32;
            Ok(out(vec![], vec![loss]))
        }
        other => Err(GraphError::Invalid(format!("cannot interpret `{other}`"))),
    }
}

fn eval_fused(kernel: &FusedKernel, args: &[&Value], tag: DTypeTag) -> Result<Value, GraphError> {
    let mut shape: Vec<usize> = Vec::new();
    for a in args {
        shape = broadcast_shape(&shape, &a.shape)
            .map_err(|_| shape_err(OpKind::Fused, &[&shape, &a.shape]))?;
    }
    let n: usize = shape.iter().product();
    let ops: Vec<Operand> = args
        .iter()
        .map(|a| {
            if a.shape == shape {
                match &a.data {
                    Buffer::F32(v) => Operand::F32(v),
                    Buffer::F16(h) => Operand::F16(h),
                }
            } else if a.data.len() == 1 {
                Operand::Scalar(a.to_f32()[0])
            } else {
                let d = a.to_f32();
                Operand::Owned(broadcast_index_map(&a.shape, &shape).iter().map(|&i| d[i]).collect())
            }
        })
        .collect();
    let row_len = *shape.last().unwrap_or(&1);
    let mut out = run_kernel(kernel, &ops, n, row_len, &[tag])?;
    Ok(Value {
        shape,
        data: out.pop().expect("one output"),
    })
}
