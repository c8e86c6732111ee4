use deskbert::graph::{
    amp_rewrite, build_gelu_unfused, build_layer_norm_unfused, build_optimizer_step_unfused,
    fuse_elementwise, fused_layer_norm, fused_optimizer_step, interpret, AdamParams, Attrs,
    DTypeTag, ExprGraph, GraphError, OpKind, Safety, SafetyTable, Src, Value,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gelu_f64(x: f64) -> f64 {
    let b = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (b * (x + 0.044715 * x * x * x)).tanh())
}

fn run1(g: &ExprGraph, shape: &[usize], x: Vec<f32>) -> Vec<f32> {
    interpret(g, &[Value::f32(shape, x)]).unwrap()[0].to_f32()
}

fn uniform(n: usize, lo: f32, hi: f32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn gelu_decomposition() {
    let g = build_gelu_unfused();
    assert_eq!(g.len(), 7);
    let kinds: Vec<OpKind> = g.nodes().iter().map(|n| n.kind()).collect();
    use OpKind::*;
    assert_eq!(kinds, vec![Pow, ScalarMul, Add, ScalarMul, Tanh, Mul, ScalarMul]);
    assert_eq!(g.node(4).attrs.offset, Some(1.0));

    assert_eq!(run1(&g, &[1], vec![0.0]), vec![0.0]);
    let y = run1(&g, &[1], vec![1.0])[0];
    assert!((y as f64 - gelu_f64(1.0)).abs() <= 1e-7, "{y} vs {}", gelu_f64(1.0));
    assert!((y - 0.8412).abs() < 1e-4);
}

#[test]
fn gelu_fuses_to_a_single_node() {
    let g = build_gelu_unfused();
    let f = fuse_elementwise(&g);
    assert_eq!(f.len(), 1);
    assert_eq!(f.count(OpKind::Fused), 1);
    let x = uniform(100_000, -10.0, 10.0, 1);
    let a = run1(&g, &[x.len()], x.clone());
    let b = run1(&f, &[x.len()], x);
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
    assert!(diff <= 1e-6);
}

#[test]
fn matmul_is_a_fusion_barrier() {
    let mut g = ExprGraph::new();
    let a = g.add_input(DTypeTag::Unassigned);
    let b = g.add_input(DTypeTag::Unassigned);
    let m = g.push(OpKind::MatMul, &[a, b], Attrs::default()).unwrap();
    g.set_outputs(&[m]).unwrap();
    assert_eq!(fuse_elementwise(&g), g);
}

#[test]
fn identity_graph_returns_its_input() {
    let mut g = ExprGraph::new();
    let x = g.add_input(DTypeTag::F32);
    g.set_outputs(&[x]).unwrap();
    assert_eq!(run1(&g, &[3], vec![1.0, -2.0, 3.5]), vec![1.0, -2.0, 3.5]);
}

#[test]
fn interpreter_reports_shape_errors() {
    let mut g = ExprGraph::new();
    let a = g.add_input(DTypeTag::F32);
    let b = g.add_input(DTypeTag::F32);
    let s = g.push(OpKind::Add, &[a, b], Attrs::default()).unwrap();
    g.set_outputs(&[s]).unwrap();
    let r = interpret(&g, &[Value::f32(&[2], vec![1.0; 2]), Value::f32(&[3], vec![1.0; 3])]);
    assert!(matches!(r, Err(GraphError::ShapeMismatch { .. })));
    let r = interpret(&g, &[Value::f32(&[2], vec![1.0; 2])]);
    assert!(matches!(r, Err(GraphError::InputCount { .. })));
}

#[test]
fn forward_references_are_rejected() {
    let mut g = ExprGraph::new();
    let x = g.add_input(DTypeTag::F32);
    assert!(matches!(
        g.push(OpKind::Add, &[x, Src::Node(0)], Attrs::default()),
        Err(GraphError::ForwardReference { .. })
    ));
}

fn unary_graph(kind: OpKind) -> ExprGraph {
    let mut g = ExprGraph::new();
    let x = g.add_input(DTypeTag::F32);
    let y = g.push(kind, &[x], Attrs::default()).unwrap();
    g.set_outputs(&[y]).unwrap();
    g
}

#[test]
fn amp_marks_add_half() {
    let mut g = ExprGraph::new();
    let x = g.add_input(DTypeTag::F32);
    let y = g.add_input(DTypeTag::F32);
    let s = g.push(OpKind::Add, &[x, y], Attrs::default()).unwrap();
    g.set_outputs(&[s]).unwrap();
    let r = amp_rewrite(&g, &SafetyTable::default()).unwrap();
    let add = r.nodes().iter().find(|n| n.kind() == OpKind::Add).unwrap();
    assert_eq!(add.dtype, DTypeTag::F16);
    // two input casts plus one cast back to the original output dtype
    assert_eq!(r.count(OpKind::Cast), 3);
}

#[test]
fn amp_keeps_log_in_full_precision() {
    let mut g = ExprGraph::new();
    let x = g.add_input(DTypeTag::F16);
    let l = g.push(OpKind::Log, &[x], Attrs::default()).unwrap();
    let t = g.push(OpKind::Tanh, &[l], Attrs::default()).unwrap();
    g.set_outputs(&[t]).unwrap();
    let r = amp_rewrite(&g, &SafetyTable::default()).unwrap();
    let kinds: Vec<(OpKind, DTypeTag)> = r.nodes().iter().map(|n| (n.kind(), n.dtype)).collect();
    assert_eq!(
        kinds,
        vec![
            (OpKind::Cast, DTypeTag::F32),
            (OpKind::Log, DTypeTag::F32),
            (OpKind::Cast, DTypeTag::F16),
            (OpKind::Tanh, DTypeTag::F16),
            (OpKind::Cast, DTypeTag::F32),
        ]
    );
}

#[test]
fn all_dangerous_graph_stays_fp32() {
    let mut g = ExprGraph::new();
    let x = g.add_input(DTypeTag::F32);
    let a = g.push(OpKind::Exp, &[x], Attrs::default()).unwrap();
    let b = g.push(OpKind::Log, &[a], Attrs::default()).unwrap();
    let c = g.push(OpKind::Pow, &[b], Attrs::k(2.0)).unwrap();
    g.set_outputs(&[c]).unwrap();
    let r = amp_rewrite(&g, &SafetyTable::default()).unwrap();
    assert!(r.nodes().iter().all(|n| n.dtype == DTypeTag::F32));
    assert_eq!(r.count(OpKind::Cast), 0);
}

#[test]
fn amp_needs_every_kind_in_the_table() {
    let mut t = SafetyTable::default();
    t.remove(OpKind::Tanh);
    assert_eq!(
        amp_rewrite(&unary_graph(OpKind::Tanh), &t),
        Err(GraphError::UnknownOpKind(OpKind::Tanh))
    );
}

#[test]
fn neutral_ops_follow_the_majority() {
    let mut t = SafetyTable::default();
    t.set(OpKind::Mul, Safety::Neutral);
    let mut g = ExprGraph::new();
    let a = g.add_input(DTypeTag::F16);
    let b = g.add_input(DTypeTag::F32);
    let m = g.push(OpKind::Mul, &[a, b], Attrs::default()).unwrap();
    let n = g.push(OpKind::Mul, &[a, a], Attrs::default()).unwrap();
    g.set_outputs(&[m, n]).unwrap();
    let r = amp_rewrite(&g, &t).unwrap();
    let muls: Vec<DTypeTag> = r
        .nodes()
        .iter()
        .filter(|n| n.kind() == OpKind::Mul)
        .map(|n| n.dtype)
        .collect();
    assert_eq!(muls, vec![DTypeTag::F32, DTypeTag::F16]);
}

fn gelu_grid() -> Vec<f32> {
    (0..=16_000).map(|i| -8.0 + i as f32 * 1e-3).collect()
}

#[test]
fn amp_gelu_tracks_fp32() {
    let g = build_gelu_unfused();
    let amp = amp_rewrite(&g, &SafetyTable::default()).unwrap();
    let x = gelu_grid();
    let n = x.len();
    let full = run1(&g, &[n], x.clone());
    let half = run1(&amp, &[n], x);
    let diff = full.iter().zip(&half).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(diff <= 2f32.powi(-8), "max abs diff {diff}");
}

#[test]
fn fusion_across_dtypes_is_exact() {
    let amp = amp_rewrite(&build_gelu_unfused(), &SafetyTable::default()).unwrap();
    let fused = fuse_elementwise(&amp);
    assert!(fused.len() < amp.len());
    let x = gelu_grid();
    let n = x.len();
    assert_eq!(run1(&amp, &[n], x.clone()), run1(&fused, &[n], x));
}

#[test]
fn layer_norm_kernel_matches_chain() {
    let g = build_layer_norm_unfused(1e-5);
    let k = fused_layer_norm(1e-5);
    let x = uniform(8 * 16, -10.0, 10.0, 7);
    let a = run1(&g, &[8, 16], x.clone());
    let b = k.eval(&[&x], 16).unwrap().remove(0);
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
    assert!(diff <= 1e-6);

    let c = k.eval(&[&[2.5f32; 32]], 16).unwrap().remove(0);
    assert!(c.iter().all(|&v| v == 0.0));
}

#[test]
fn optimizer_kernel_matches_chain() {
    let p = AdamParams {
        weight_decay: 0.01,
        step: 3,
        ..AdamParams::default()
    };
    let n = 1000;
    let w = uniform(n, -1.0, 1.0, 1);
    let gr = uniform(n, -1.0, 1.0, 2);
    let m = uniform(n, -0.1, 0.1, 3);
    let v = uniform(n, 0.0, 0.01, 4);
    let g = build_optimizer_step_unfused(&p);
    let vals: Vec<Value> = [&w, &gr, &m, &v].iter().map(|d| Value::f32(&[n], d.to_vec())).collect();
    let a = interpret(&g, &vals).unwrap();
    let b = fused_optimizer_step(&p).eval(&[&w, &gr, &m, &v], n).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let diff = x.to_f32().iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
        assert!(diff <= 1e-6);
    }

    let zero = vec![0f32; n];
    let out = fused_optimizer_step(&AdamParams::default())
        .eval(&[&w, &zero, &zero, &zero], n)
        .unwrap();
    let lr = 0.1;
    let stepped: Vec<f32> = w.iter().zip(&out[2]).map(|(a, u)| a - lr * u).collect();
    assert_eq!(stepped, w);
}

#[test]
fn text_round_trip() {
    let gelu = build_gelu_unfused();
    let amp = amp_rewrite(&gelu, &SafetyTable::default()).unwrap();
    let mut perm = ExprGraph::new();
    let x = perm.add_input(DTypeTag::F32);
    let r = perm
        .push(OpKind::Reshape, &[x], Attrs { shape: Some(vec![2, 3]), ..Attrs::default() })
        .unwrap();
    let p = perm
        .push(OpKind::Permute, &[r], Attrs { axes: Some(vec![1, 0]), ..Attrs::default() })
        .unwrap();
    let m = perm.push(OpKind::Mean, &[p], Attrs::rowwise()).unwrap();
    perm.set_outputs(&[m, x]).unwrap();
    for g in [gelu.clone(), fuse_elementwise(&gelu), fuse_elementwise(&amp), amp, perm] {
        let text = g.dump();
        let back = ExprGraph::load(&text).unwrap();
        assert_eq!(back, g, "{text}");
    }
}

#[test]
fn malformed_text_is_rejected() {
    assert!(ExprGraph::load("graph v1\ninput $0 f32\n%0 add f32 $0 %1\noutput %0\n").is_err());
    assert!(ExprGraph::load("graph v2\noutput\n").is_err());
    assert!(matches!(
        ExprGraph::load("graph v1\ninput $0 f32\n%0 frobnicate f32 $0\noutput %0\n"),
        Err(GraphError::Parse { line: 3, .. })
    ));
}

const POOL: [OpKind; 9] = [
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Neg,
    OpKind::ScalarMul,
    OpKind::AddScalar,
    OpKind::Tanh,
    OpKind::Gelu,
    OpKind::Softmax,
];

/// A random DAG over two inputs; `spec` picks op and operands per node.
fn random_graph(spec: &[(usize, usize, usize, f32)], n_outputs: usize) -> ExprGraph {
    let mut g = ExprGraph::new();
    let mut avail = vec![g.add_input(DTypeTag::F32), g.add_input(DTypeTag::F32)];
    for &(op, a, b, k) in spec {
        let kind = POOL[op % POOL.len()];
        let x = avail[a % avail.len()];
        let y = avail[b % avail.len()];
        let s = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => g.push(kind, &[x, y], Attrs::default()),
            OpKind::ScalarMul | OpKind::AddScalar => g.push(kind, &[x], Attrs::k(k)),
            _ => g.push(kind, &[x], Attrs::default()),
        }
        .unwrap();
        avail.push(s);
    }
    let outs: Vec<Src> = avail.iter().rev().take(n_outputs).copied().collect();
    g.set_outputs(&outs).unwrap();
    g
}

fn close(a: f32, b: f32) -> bool {
    a == b || (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_preserves_semantics(
        spec in prop::collection::vec((0usize..9, 0usize..64, 0usize..64, -2.0f32..2.0), 1..=20),
        n_outputs in 1usize..3,
        seed in any::<u64>(),
    ) {
        let g = random_graph(&spec, n_outputs);
        let f = fuse_elementwise(&g);
        prop_assert!(f.len() <= g.len());
        let inputs = [
            Value::f32(&[100, 100], uniform(10_000, -10.0, 10.0, seed)),
            Value::f32(&[100, 100], uniform(10_000, -10.0, 10.0, seed ^ 1)),
        ];
        let a = interpret(&g, &inputs).unwrap();
        let b = interpret(&f, &inputs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.shape, &y.shape);
            for (p, q) in x.to_f32().iter().zip(y.to_f32()) {
                prop_assert!(close(*p, q), "{} vs {}", p, q);
            }
        }
        // fusion is idempotent
        prop_assert_eq!(fuse_elementwise(&f), f);
    }

    #[test]
    fn amp_never_halves_dangerous_ops(
        spec in prop::collection::vec((0usize..9, 0usize..64, 0usize..64, -2.0f32..2.0), 1..=20),
    ) {
        let mut g = random_graph(&spec, 1);
        let last = Src::Node(g.len() - 1);
        let l = g.push(OpKind::Log, &[last], Attrs::default()).unwrap();
        let p = g.push(OpKind::Pow, &[l], Attrs::k(2.0)).unwrap();
        g.set_outputs(&[p]).unwrap();
        let t = SafetyTable::default();
        let r = amp_rewrite(&g, &t).unwrap();
        for n in r.nodes() {
            if t.get(n.kind()) == Some(Safety::Dangerous) {
                prop_assert_eq!(n.dtype, DTypeTag::F32);
            }
            if n.kind() != OpKind::Cast {
                for s in &n.inputs {
                    prop_assert_eq!(r.dtype_of(*s), n.dtype);
                }
            }
        }
        prop_assert!(r.validate().is_ok());
        let x = [Value::f32(&[4, 4], uniform(16, -3.0, 3.0, 5)), Value::f32(&[4, 4], uniform(16, -3.0, 3.0, 6))];
        prop_assert_eq!(interpret(&r, &x).unwrap()[0].data.len(), 16);
    }
}
