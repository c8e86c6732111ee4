use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{
    self, broadcast_binary, broadcast_shape, gelu, gelu_grad, gemm, layer_norm_rows,
    pow_scalar, reduce_to_shape, softmax_rows,
};
use super::{numel, DType, Tensor, TensorError};
use crate::graph::{OpKind, Safety, SafetyTable};
use crate::half;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    ScalarMul(usize, f32),
    AddScalar(usize),
    Pow(usize, f32),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Softmax(usize),
    LayerNorm { x: usize, rstd: Vec<f32> },
    Gelu(usize),
    Dropout { x: usize, mask: Vec<f32> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
    Sum(usize),
    Mean(usize),
    MeanLast(usize),
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    GatherRows { table: usize, ids: Vec<usize> },
    Cast(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::ScalarMul(x, _)
            | Op::AddScalar(x)
            | Op::Pow(x, _)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::Gelu(x)
            | Op::Dropout { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanLast(x)
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Cast(x) => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::GatherRows { table, .. } => vec![table],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records executed ops in order; `backward` replays them in exact reverse.
///
/// With autocast enabled every op picks its compute dtype from the safety
/// table and inserts explicit cast nodes on mismatched inputs. Without it,
/// mixing dtypes is an error.
pub struct Tape {
    nodes: Vec<Node>,
    autocast: Option<SafetyTable>,
    cast_cache: HashMap<(usize, DType), usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of the leaves that required them. Leaves that the loss does
/// not depend on get an explicit zero tensor.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            autocast: None,
            cast_cache: HashMap::new(),
        }
    }

    /// A tape that runs every op in the dtype chosen by `table`.
    pub fn with_autocast(table: SafetyTable) -> Tape {
        Tape {
            autocast: Some(table),
            ..Tape::new()
        }
    }

    pub fn autocast(&self) -> Option<&SafetyTable> {
        self.autocast.as_ref()
    }

    /// Run `f` with autocast replaced by `table`, restoring it afterwards.
    pub fn scoped_autocast<R>(
        &mut self,
        table: Option<SafetyTable>,
        f: impl FnOnce(&mut Tape) -> R,
    ) -> R {
        let saved = std::mem::replace(&mut self.autocast, table);
        let out = f(self);
        self.autocast = saved;
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dtype(&self, v: Var) -> DType {
        self.nodes[v.0].value.dtype()
    }

    /// A trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn record(&mut self, shape: Vec<usize>, dtype: DType, data: Vec<f32>, op: Op) -> Var {
        let rg = self.any_grad(&op.inputs());
        self.push(Tensor::raw(shape, dtype, data), op, rg)
    }

    fn cast_index(&mut self, x: usize, dtype: DType) -> usize {
        if self.nodes[x].value.dtype() == dtype {
            return x;
        }
        if let Some(&c) = self.cast_cache.get(&(x, dtype)) {
            return c;
        }
        let t = self.nodes[x].value.cast(dtype);
        let rg = self.nodes[x].requires_grad;
        let c = self.push(t, Op::Cast(x), rg).0;
        self.cast_cache.insert((x, dtype), c);
        c
    }

    /// Resolve the compute dtype of an op and cast inputs as needed.
    fn prepare(
        &mut self,
        kind: OpKind,
        name: &'static str,
        inputs: &[Var],
    ) -> Result<(DType, Vec<usize>), TensorError> {
        let dtypes: Vec<DType> = inputs.iter().map(|v| self.dtype(*v)).collect();
        let Some(table) = &self.autocast else {
            for w in dtypes.windows(2) {
                if w[0] != w[1] {
                    return Err(TensorError::DtypeMismatch {
                        op: name,
                        lhs: w[0],
                        rhs: w[1],
                    });
                }
            }
            return Ok((dtypes[0], inputs.iter().map(|v| v.0).collect()));
        };
        let target = match table.get(kind) {
            None => return Err(TensorError::UnknownOpKind(kind.name().to_string())),
            Some(Safety::Safe) => DType::F16,
            Some(Safety::Dangerous) => DType::F32,
            Some(Safety::Neutral) => {
                let halves = dtypes.iter().filter(|d| **d == DType::F16).count();
                if halves * 2 > dtypes.len() {
                    DType::F16
                } else {
                    DType::F32
                }
            }
        };
        let idx = inputs
            .iter()
            .map(|v| self.cast_index(v.0, target))
            .collect();
        Ok((target, idx))
    }

    fn data(&self, i: usize) -> &[f32] {
        self.nodes[i].value.data()
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    // ---- element-wise ----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let (op_kind, name) = match kind {
            Binary::Add => (OpKind::Add, "add"),
            Binary::Sub => (OpKind::Sub, "sub"),
            Binary::Mul => (OpKind::Mul, "mul"),
            Binary::Div => (OpKind::Div, "div"),
        };
        let (dtype, idx) = self.prepare(op_kind, name, &[a, b])?;
        let (ia, ib) = (idx[0], idx[1]);
        let out_shape = broadcast_shape(self.shape_of(ia), self.shape_of(ib))
            .map_err(|_| mismatch(name, self.shape_of(ia), self.shape_of(ib)))?;
        let f: fn(f32, f32) -> f32 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = broadcast_binary(
            self.data(ia),
            self.shape_of(ia),
            self.data(ib),
            self.shape_of(ib),
            &out_shape,
            f,
        );
        Ok(self.record(out_shape, dtype, data, Op::Binary(kind, ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(
        &mut self,
        kind: OpKind,
        name: &'static str,
        x: Var,
        f: impl Fn(f32) -> f32,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(kind, name, &[x])?;
        let i = idx[0];
        let data: Vec<f32> = self.data(i).iter().map(|&v| f(v)).collect();
        let shape = self.shape_of(i).to_vec();
        Ok(self.record(shape, dtype, data, op(i)))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f32) -> Result<Var, TensorError> {
        self.unary(OpKind::ScalarMul, "scalar_mul", x, |v| s * v, |i| {
            Op::ScalarMul(i, s)
        })
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var, TensorError> {
        self.unary(OpKind::AddScalar, "add_scalar", x, |v| v + s, Op::AddScalar)
    }

    pub fn pow(&mut self, x: Var, p: f32) -> Result<Var, TensorError> {
        self.unary(OpKind::Pow, "pow", x, |v| pow_scalar(v, p), |i| Op::Pow(i, p))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Tanh, "tanh", x, f32::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Exp, "exp", x, f32::exp, Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Log, "log", x, f32::ln, Op::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Sqrt, "sqrt", x, f32::sqrt, Op::Sqrt)
    }

    /// Tanh-approximated GELU as one fused op.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(OpKind::Gelu, "gelu", x, gelu, Op::Gelu)
    }

    /// Inverted dropout with an explicit seed. A rate of zero is the identity.
    pub fn dropout(&mut self, x: Var, rate: f32, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        let (dtype, idx) = self.prepare(OpKind::Dropout, "dropout", &[x])?;
        let i = idx[0];
        let n = self.nodes[i].value.numel();
        let mask: Vec<f32> = if rate == 0.0 {
            vec![1.0; n]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
                .collect()
        };
        let data = self.data(i).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape_of(i).to_vec();
        Ok(self.record(shape, dtype, data, Op::Dropout { x: i, mask }))
    }

    pub fn cast(&mut self, x: Var, dtype: DType) -> Var {
        Var(self.cast_index(x.0, dtype))
    }

    // ---- linear algebra ----

    /// `a · b` for `a`: [.., m, k]. `b` is either [k, n] (shared across the
    /// leading dims of `a`) or [.., k, n] with the same leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where `b` is stored as [.., n, k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::MatMul, "matmul", &[a, b])?;
        let (ia, ib) = (idx[0], idx[1]);
        let geo = MatMulGeometry::new(self.shape_of(ia), self.shape_of(ib), trans_b)?;
        let mut out = vec![0f32; geo.batch * geo.m * geo.n];
        {
            let (ad, bd) = (self.data(ia), self.data(ib));
            for bi in 0..geo.batch {
                let a_blk = &ad[bi * geo.m * geo.k..(bi + 1) * geo.m * geo.k];
                let b_blk = if geo.shared_b {
                    bd
                } else {
                    &bd[bi * geo.k * geo.n..(bi + 1) * geo.k * geo.n]
                };
                let o = &mut out[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n];
                gemm(geo.m, geo.k, geo.n, a_blk, false, b_blk, trans_b, o);
            }
        }
        Ok(self.record(
            geo.out_shape.clone(),
            dtype,
            out,
            Op::MatMul {
                a: ia,
                b: ib,
                trans_b,
            },
        ))
    }

    // ---- row-wise ----

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::Softmax, "softmax", &[x])?;
        let i = idx[0];
        let shape = self.shape_of(i).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let data = softmax_rows(self.data(i), cols);
        Ok(self.record(shape, dtype, data, Op::Softmax(i)))
    }

    /// Normalise over the last axis (no affine parameters).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::LayerNorm, "layer_norm", &[x])?;
        let i = idx[0];
        let shape = self.shape_of(i).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let (data, _, rstd) = layer_norm_rows(self.data(i), cols, eps);
        Ok(self.record(shape, dtype, data, Op::LayerNorm { x: i, rstd }))
    }

    /// Mean cross-entropy of row-wise logits [n, classes] against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::CrossEntropy, "cross_entropy", &[logits])?;
        let i = idx[0];
        let shape = self.shape_of(i).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(mismatch("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = softmax_rows(self.data(i), classes);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(probs[r * classes + l].max(f32::MIN_POSITIVE)).ln())
            .sum::<f32>()
            / labels.len() as f32;
        Ok(self.record(
            vec![],
            dtype,
            vec![loss],
            Op::CrossEntropy {
                logits: i,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::Sum, "sum", &[x])?;
        let s = self.data(idx[0]).iter().sum();
        Ok(self.record(vec![], dtype, vec![s], Op::Sum(idx[0])))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::Mean, "mean", &[x])?;
        let d = self.data(idx[0]);
        let s = d.iter().sum::<f32>() / d.len() as f32;
        Ok(self.record(vec![], dtype, vec![s], Op::Mean(idx[0])))
    }

    /// Mean over the last axis, keeping it as an extent of one.
    pub fn mean_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::Mean, "mean_last", &[x])?;
        let i = idx[0];
        let mut shape = self.shape_of(i).to_vec();
        let cols = shape.pop().unwrap_or(1);
        let data: Vec<f32> = self
            .data(i)
            .chunks(cols)
            .map(|r| r.iter().sum::<f32>() / cols as f32)
            .collect();
        shape.push(1);
        Ok(self.record(shape, dtype, data, Op::MeanLast(i)))
    }

    // ---- data movement ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::Reshape, "reshape", &[x])?;
        let i = idx[0];
        if numel(shape) != self.nodes[i].value.numel() {
            return Err(mismatch("reshape", self.shape_of(i), shape));
        }
        let data = self.data(i).to_vec();
        Ok(self.record(shape.to_vec(), dtype, data, Op::Reshape(i)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::Permute, "permute", &[x])?;
        let i = idx[0];
        let rank = self.shape_of(i).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let (data, shape) = kernels::permute(self.data(i), self.shape_of(i), perm);
        Ok(self.record(
            shape,
            dtype,
            data,
            Op::Permute {
                x: i,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Rows `ids` of a 2-D table; used for embeddings and masked-position selection.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (dtype, idx) = self.prepare(OpKind::Gather, "gather_rows", &[table])?;
        let i = idx[0];
        let shape = self.shape_of(i).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("gather_rows", &shape, &[ids.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&r| r >= rows) {
            return Err(TensorError::Invalid(format!("row {bad} out of range for {rows} rows")));
        }
        if ids.is_empty() {
            return Err(TensorError::EmptyExtent(vec![0, cols]));
        }
        let src = self.data(i);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &r in ids {
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        Ok(self.record(
            vec![ids.len(), cols],
            dtype,
            data,
            Op::GatherRows {
                table: i,
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- backward ----

    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        self.backward_with(loss, 1.0, |_, _| {})
    }

    /// Reverse pass seeded with `seed` (the loss scale). `on_ready` fires for
    /// each trainable leaf as soon as no remaining node can contribute to its
    /// gradient, in the order backward finishes them.
    pub fn backward_with(
        &self,
        loss: Var,
        seed: f32,
        mut on_ready: impl FnMut(Var, &Tensor),
    ) -> Result<Gradients, TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape_of(loss.0)
            )));
        }
        let n = loss.0 + 1;
        // the earliest consumer of each leaf: once backward has passed it, the
        // leaf's gradient is final
        let mut first_consumer: Vec<Option<usize>> = vec![None; n];
        for (j, node) in self.nodes[..n].iter().enumerate() {
            for i in node.op.inputs() {
                if first_consumer[i].is_none() {
                    first_consumer[i] = Some(j);
                }
            }
        }
        let mut ready_at: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut orphans = Vec::new();
        for (i, node) in self.nodes[..n].iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match first_consumer[i] {
                    Some(j) => ready_at[j].push(i),
                    None if i == loss.0 => ready_at[i].push(i),
                    None => orphans.push(i),
                }
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        let mut out = Gradients::default();

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                if let Some(mut g) = grads[i].take() {
                    if node.value.dtype() == DType::F16 {
                        half::round_slice(&mut g);
                    }
                    self.propagate(i, &g, &mut grads)?;
                }
            }
            for &leaf in &ready_at[i] {
                let t = self.finish_leaf(leaf, grads[leaf].take());
                on_ready(Var(leaf), &t);
                out.grads.insert(leaf, t);
            }
        }
        for leaf in orphans {
            let t = self.finish_leaf(leaf, None);
            on_ready(Var(leaf), &t);
            out.grads.insert(leaf, t);
        }
        Ok(out)
    }

    fn finish_leaf(&self, leaf: usize, g: Option<Vec<f32>>) -> Tensor {
        let v = &self.nodes[leaf].value;
        let g = g.unwrap_or_else(|| vec![0.0; v.numel()]);
        Tensor::raw(v.shape().to_vec(), v.dtype(), g)
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let mut acc = |j: usize, contrib: Vec<f32>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape_of(a), self.shape_of(b));
                match kind {
                    Binary::Add => {
                        acc(a, reduce_to_shape(g, out_shape, sa));
                        acc(b, reduce_to_shape(g, out_shape, sb));
                    }
                    Binary::Sub => {
                        acc(a, reduce_to_shape(g, out_shape, sa));
                        let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                        acc(b, reduce_to_shape(&neg, out_shape, sb));
                    }
                    Binary::Mul => {
                        let bb = broadcast_binary(g, out_shape, self.data(b), sb, out_shape, |x, y| x * y);
                        acc(a, reduce_to_shape(&bb, out_shape, sa));
                        let aa = broadcast_binary(g, out_shape, self.data(a), sa, out_shape, |x, y| x * y);
                        acc(b, reduce_to_shape(&aa, out_shape, sb));
                    }
                    Binary::Div => {
                        let ga = broadcast_binary(g, out_shape, self.data(b), sb, out_shape, |x, y| x / y);
                        acc(a, reduce_to_shape(&ga, out_shape, sa));
                        // d(a/b)/db = -out / b
                        let ob = broadcast_binary(out, out_shape, self.data(b), sb, out_shape, |o, y| -o / y);
                        let gb: Vec<f32> = ob.iter().zip(g).map(|(x, y)| x * y).collect();
                        acc(b, reduce_to_shape(&gb, out_shape, sb));
                    }
                }
            }
            Op::ScalarMul(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Pow(x, p) => {
                let xs = self.data(*x);
                acc(
                    *x,
                    xs.iter()
                        .zip(g)
                        .map(|(&v, &gv)| gv * p * pow_scalar(v, p - 1.0))
                        .collect(),
                )
            }
            Op::Tanh(x) => acc(*x, out.iter().zip(g).map(|(&t, &gv)| gv * (1.0 - t * t)).collect()),
            Op::Exp(x) => acc(*x, out.iter().zip(g).map(|(&e, &gv)| gv * e).collect()),
            Op::Log(x) => acc(*x, self.data(*x).iter().zip(g).map(|(&v, &gv)| gv / v).collect()),
            Op::Sqrt(x) => acc(*x, out.iter().zip(g).map(|(&s, &gv)| gv * 0.5 / s).collect()),
            Op::Gelu(x) => acc(
                *x,
                self.data(*x).iter().zip(g).map(|(&v, &gv)| gv * gelu_grad(v)).collect(),
            ),
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
            Op::Cast(x) => acc(*x, g.to_vec()),
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let geo = MatMulGeometry::new(self.shape_of(a), self.shape_of(b), trans_b)?;
                let (ad, bd) = (self.data(a), self.data(b));
                let (m, k, n) = (geo.m, geo.k, geo.n);
                if self.nodes[a].requires_grad {
                    let mut ga = vec![0f32; ad.len()];
                    for bi in 0..geo.batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let b_blk = if geo.shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gb, false, b_blk, !trans_b, &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                    acc(a, ga);
                }
                if self.nodes[b].requires_grad {
                    if geo.shared_b {
                        // fold the batch into rows: dB = Aᵀ · dC over all rows
                        let rows = geo.batch * m;
                        let mut gbm = vec![0f32; k * n];
                        if trans_b {
                            gemm(n, rows, k, g, true, ad, false, &mut gbm);
                        } else {
                            gemm(k, rows, n, ad, true, g, false, &mut gbm);
                        }
                        acc(b, gbm);
                    } else {
                        let mut gbm = vec![0f32; bd.len()];
                        for bi in 0..geo.batch {
                            let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let o = &mut gbm[bi * k * n..(bi + 1) * k * n];
                            if trans_b {
                                gemm(n, m, k, gb, true, a_blk, false, o);
                            } else {
                                gemm(k, m, n, a_blk, true, gb, false, o);
                            }
                        }
                        acc(b, gbm);
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *out_shape.last().unwrap_or(&1);
                let mut gx = vec![0f32; out.len()];
                for ((y, gy), o) in out.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((oi, &yi), &gi) in o.iter_mut().zip(y).zip(gy) {
                        *oi = yi * (gi - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, rstd } => {
                let cols = *out_shape.last().unwrap_or(&1);
                let inv_n = 1.0 / cols as f32;
                let mut gx = vec![0f32; out.len()];
                for (r, ((y, gy), o)) in out
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                    .enumerate()
                {
                    let mean_g = gy.iter().sum::<f32>() * inv_n;
                    let mean_gy = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f32>() * inv_n;
                    for ((oi, &yi), &gi) in o.iter_mut().zip(y).zip(gy) {
                        *oi = rstd[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                acc(*x, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape_of(*logits)[1];
                let scale = g[0] / labels.len() as f32;
                let mut gx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * classes + l] -= scale;
                }
                acc(*logits, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[*x].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                acc(*x, vec![g[0] / n as f32; n])
            }
            Op::MeanLast(x) => {
                let cols = *self.shape_of(*x).last().unwrap_or(&1);
                let inv = 1.0 / cols as f32;
                let mut gx = Vec::with_capacity(g.len() * cols);
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, cols));
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (gx, _) = kernels::permute(g, out_shape, &inv);
                acc(*x, gx);
            }
            Op::GatherRows { table, ids } => {
                let cols = self.shape_of(*table)[1];
                let mut gt = vec![0f32; self.nodes[*table].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &gv) in gt[id * cols..(id + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *t += gv;
                    }
                }
                acc(*table, gt);
            }
        }
        Ok(())
    }
}

struct MatMulGeometry {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_shape: Vec<usize>,
}

impl MatMulGeometry {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self, TensorError> {
        let bad = || mismatch("matmul", a, b);
        if a.len() < 2 || b.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != bk {
            return Err(bad());
        }
        let lead_a = &a[..a.len() - 2];
        let batch: usize = lead_a.iter().product();
        let shared_b = b.len() == 2;
        if !shared_b && &b[..b.len() - 2] != lead_a {
            return Err(bad());
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        Ok(MatMulGeometry {
            batch,
            m,
            k,
            n,
            shared_b,
            out_shape,
        })
    }
}
