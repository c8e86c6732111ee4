use deskbert::data::{make_examples, Batch, SyntheticCorpus, TrainingExample};
use deskbert::graph::SafetyTable;
use deskbert::model::checkpoint;
use deskbert::model::{
    param_group_report, trust_ratio, BertMini, ForwardOptions, Lamb, ModelConfig, ModelError, Optimizer,
    ParamGroup,
};
use deskbert::tensor::{DType, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig::default()
}

fn micro_cfg() -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        vocab: 20,
        max_positions: 16,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

fn examples(vocab: usize, seq_len: usize, max_pred: usize, n: usize, seed: u64) -> Vec<TrainingExample> {
    let corpus = SyntheticCorpus {
        sentences: n + 1,
        vocab,
        ..SyntheticCorpus::default()
    };
    let sentences = corpus.generate(seed);
    make_examples(&sentences, seq_len, max_pred, seed).unwrap()
}

fn batch(vocab: usize, seq_len: usize, max_pred: usize, n: usize, seed: u64) -> Batch {
    Batch::from_examples(&examples(vocab, seq_len, max_pred, n, seed)[..n]).unwrap()
}

fn plain() -> ForwardOptions {
    ForwardOptions::default()
}

#[test]
fn forward_shapes() {
    let model = BertMini::new(small_cfg(), 7).unwrap();
    let b = batch(1000, 128, 20, 4, 1);
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &b, &plain()).unwrap();
    let mlm = tape.value(f.mlm_logits.unwrap());
    assert_eq!(mlm.shape(), &[b.masked_count(), 1000]);
    assert_eq!(tape.value(f.nsp_logits).shape(), &[4, 2]);
    assert_eq!(tape.value(f.loss).numel(), 1);
}

#[test]
fn same_seed_same_parameters() {
    let a = BertMini::new(small_cfg(), 42).unwrap();
    let b = BertMini::new(small_cfg(), 42).unwrap();
    let c = BertMini::new(small_cfg(), 43).unwrap();
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        let bx: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let by: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bx, by);
    }
    assert_eq!(a.param_hash(), b.param_hash());
    assert_ne!(a.param_hash(), c.param_hash());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = ModelConfig {
        heads: 3,
        ..small_cfg()
    };
    assert!(matches!(BertMini::new(bad, 0), Err(ModelError::InvalidConfig(_))));
    let tiny_vocab = ModelConfig {
        vocab: 3,
        ..small_cfg()
    };
    assert!(matches!(BertMini::new(tiny_vocab, 0), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn initial_loss_near_uniform_entropy() {
    let cfg = small_cfg();
    let model = BertMini::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut b = batch(cfg.vocab, 128, 20, 8, 2);
    for l in &mut b.mask_labels {
        *l = rng.random_range(5..cfg.vocab);
    }
    for n in &mut b.is_next {
        *n = rng.random();
    }
    let loss = model.eval_loss(&b, &plain()).unwrap() as f64;
    let expected = (cfg.vocab as f64).ln() + 2f64.ln();
    assert!(((loss - expected) / expected).abs() < 0.10, "loss {loss} expected {expected}");
}

#[test]
fn fused_and_amp_forward_agree_with_reference() {
    let model = BertMini::new(small_cfg(), 5).unwrap();
    let b = batch(1000, 32, 5, 4, 6);
    let base = model.eval_loss(&b, &plain()).unwrap();
    let fused = model
        .eval_loss(
            &b,
            &ForwardOptions {
                fused: true,
                ..plain()
            },
        )
        .unwrap();
    assert!((base - fused).abs() < 1e-4, "{base} vs {fused}");
    let amp = model
        .eval_loss(
            &b,
            &ForwardOptions {
                fused: true,
                autocast: Some(SafetyTable::default()),
                ..plain()
            },
        )
        .unwrap();
    assert!(((base - amp) / base).abs() < 1e-2, "{base} vs {amp}");
}

#[test]
fn dropout_is_seeded() {
    let model = BertMini::new(small_cfg(), 5).unwrap();
    let b = batch(1000, 32, 5, 2, 6);
    let opts = |s| ForwardOptions {
        dropout_seed: Some(s),
        ..plain()
    };
    let a = model.loss_and_grads(&b, &opts(1), 1.0, |_, _| {}).unwrap().loss;
    let a2 = model.loss_and_grads(&b, &opts(1), 1.0, |_, _| {}).unwrap().loss;
    let c = model.loss_and_grads(&b, &opts(2), 1.0, |_, _| {}).unwrap().loss;
    assert_eq!(a.to_bits(), a2.to_bits());
    assert_ne!(a.to_bits(), c.to_bits());
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = micro_cfg();
    let model = BertMini::new(cfg.clone(), 11).unwrap();
    let b = batch(cfg.vocab, 16, 3, 2, 4);
    let analytic = model.loss_and_grads(&b, &plain(), 1.0, |_, _| {}).unwrap().grads;

    let h = 5e-3f32;
    let mut probe = BertMini::new(cfg, 11).unwrap();
    let (mut diff2, mut ref2) = (0f64, 0f64);
    for (pi, g) in analytic.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = probe.tensors()[pi].data()[i];
            probe.tensors_mut()[pi].update(|d| d[i] = orig + h);
            let up = probe.eval_loss(&b, &plain()).unwrap() as f64;
            probe.tensors_mut()[pi].update(|d| d[i] = orig - h);
            let down = probe.eval_loss(&b, &plain()).unwrap() as f64;
            probe.tensors_mut()[pi].update(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * h as f64);
            let a = g.data()[i] as f64;
            diff2 += (a - numeric).powi(2);
            ref2 += numeric.powi(2);
        }
    }
    let rel = (diff2 / ref2).sqrt();
    assert!(rel < 1e-2, "relative gradient error {rel}");
}

#[test]
fn dense_layer_gradients_are_dense() {
    let model = BertMini::new(small_cfg(), 1).unwrap();
    let b = batch(1000, 64, 10, 4, 3);
    let g = model.loss_and_grads(&b, &plain(), 1.0, |_, _| {}).unwrap().grads;
    let (mut zeros, mut total) = (0usize, 0usize);
    for (t, grp) in g.iter().zip(model.param_groups()) {
        if matches!(grp, ParamGroup::Attention | ParamGroup::Intermediate | ParamGroup::Output) {
            zeros += t.data().iter().filter(|&&v| v == 0.0).count();
            total += t.numel();
        }
    }
    assert!((zeros as f64) < 0.01 * total as f64, "{zeros} of {total} zero");
}

#[test]
fn forward_is_batch_permutation_equivariant() {
    let model = BertMini::new(small_cfg(), 2).unwrap();
    let ex = examples(1000, 32, 5, 4, 8);
    let perm = [2usize, 0, 3, 1];
    let shuffled: Vec<TrainingExample> = perm.iter().map(|&i| ex[i].clone()).collect();
    let run = |exs: &[TrainingExample]| {
        let b = Batch::from_examples(exs).unwrap();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &b, &plain()).unwrap();
        let nsp = tape.value(f.nsp_logits).clone();
        let mlm = tape.value(f.mlm_logits.unwrap()).clone();
        (nsp, mlm)
    };
    let (nsp, mlm) = run(&ex[..4]);
    let (nsp_p, mlm_p) = run(&shuffled);
    let mut mlm_offsets = vec![0usize];
    for e in &ex[..4] {
        mlm_offsets.push(mlm_offsets.last().unwrap() + e.mask_positions.len());
    }
    let v = 1000;
    let mut row = 0;
    for (k, &src) in perm.iter().enumerate() {
        for c in 0..2 {
            let (a, b) = (nsp_p.data()[k * 2 + c], nsp.data()[src * 2 + c]);
            assert!((a - b).abs() <= 1e-5, "nsp {k}: {a} vs {b}");
        }
        for r in mlm_offsets[src]..mlm_offsets[src + 1] {
            let a = &mlm_p.data()[row * v..(row + 1) * v];
            let b = &mlm.data()[r * v..(r + 1) * v];
            let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(d <= 1e-5, "mlm row {row}: {d}");
            row += 1;
        }
    }
}

#[test]
fn readiness_callback_covers_every_parameter() {
    let model = BertMini::new(micro_cfg(), 2).unwrap();
    let b = batch(20, 16, 3, 2, 4);
    let mut seen = Vec::new();
    let out = model.loss_and_grads(&b, &plain(), 1.0, |i, g| seen.push((i, g.clone()))).unwrap();
    let mut idx: Vec<usize> = seen.iter().map(|(i, _)| *i).collect();
    idx.sort_unstable();
    assert_eq!(idx, (0..model.tensors().len()).collect::<Vec<_>>());
    for (i, g) in seen {
        assert_eq!(g.max_abs_diff(&out.grads[i]), 0.0);
    }
}

#[test]
fn loss_scale_scales_gradients() {
    let model = BertMini::new(micro_cfg(), 2).unwrap();
    let b = batch(20, 16, 3, 2, 4);
    let g1 = model.loss_and_grads(&b, &plain(), 1.0, |_, _| {}).unwrap().grads;
    let g4 = model.loss_and_grads(&b, &plain(), 4096.0, |_, _| {}).unwrap().grads;
    for (a, b) in g1.iter().zip(&g4) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!((x * 4096.0).to_bits(), y.to_bits());
        }
    }
}

#[test]
fn lamb_zero_gradient_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params: Vec<Tensor> = (0..3)
        .map(|n| Tensor::from_vec(&[n + 2], (0..n + 2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let before = params.clone();
    let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut opt = Lamb::new(0.1);
    for _ in 0..3 {
        opt.step(&mut params, &grads).unwrap();
    }
    for (a, b) in params.iter().zip(&before) {
        assert_eq!(a.max_abs_diff(b), 0.0);
    }
}

/// Closed form for one scalar: u = m̂/(√v̂+ε) + λw, w -= lr·clip(|w|/|u|)·u.
fn scalar_lamb_oracle(mut w: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        let u = mh / (vh.sqrt() + eps) + wd * w;
        let r = if w == 0.0 || u == 0.0 { 1.0 } else { (w.abs() / u.abs()).min(10.0) };
        w -= lr * r * u;
        out.push(w);
    }
    out
}

#[test]
fn lamb_scalar_matches_closed_form() {
    let grads = [0.5, -0.25, 2.0];
    for (w0, wd) in [(1.5f64, 0.0f64), (-0.3, 0.01), (0.0, 0.01), (2.0, 0.1)] {
        let oracle = scalar_lamb_oracle(w0, &grads, 0.01, 0.9, 0.999, 1e-6, wd);
        for fused in [false, true] {
            let mut opt = Lamb::new(0.01);
            opt.weight_decay = wd as f32;
            opt.fused = fused;
            let mut p = vec![Tensor::from_vec(&[1], vec![w0 as f32]).unwrap()];
            for (t, &g) in grads.iter().enumerate() {
                opt.step(&mut p, &[Tensor::from_vec(&[1], vec![g as f32]).unwrap()]).unwrap();
                let got = p[0].data()[0] as f64;
                assert!(
                    (got - oracle[t]).abs() <= 1e-6 * oracle[t].abs().max(1.0),
                    "w0 {w0} wd {wd} step {t}: {got} vs {}",
                    oracle[t]
                );
            }
            assert_eq!(opt.steps_taken(), 3);
        }
    }
}

#[test]
fn lamb_trust_ratio_bounds() {
    assert_eq!(trust_ratio(0.0, 5.0), 1.0);
    assert_eq!(trust_ratio(5.0, 0.0), 1.0);
    assert_eq!(trust_ratio(100.0, 1.0), 10.0);
    assert_eq!(trust_ratio(1.0, 4.0), 0.25);
}

#[test]
fn lamb_rejects_non_finite_gradients() {
    let mut p = vec![Tensor::ones(&[2]), Tensor::ones(&[2])];
    let g = vec![Tensor::ones(&[2]), Tensor::from_vec(&[2], vec![1.0, f32::INFINITY]).unwrap()];
    let before = p.clone();
    let err = Lamb::new(0.1).step(&mut p, &g).unwrap_err();
    assert!(matches!(err, ModelError::NonFiniteGradient(1)));
    assert_eq!(p[0].max_abs_diff(&before[0]), 0.0);
}

#[test]
fn lamb_fused_matches_unfused_on_model() {
    let model = BertMini::new(micro_cfg(), 6).unwrap();
    let b = batch(20, 16, 3, 2, 4);
    let g = model.loss_and_grads(&b, &plain(), 1.0, |_, _| {}).unwrap().grads;
    let mut ps = [model.tensors().to_vec(), model.tensors().to_vec()];
    for (k, p) in ps.iter_mut().enumerate() {
        let mut opt = Lamb::new(1e-3);
        opt.weight_decay = 0.01;
        opt.decay_mask = Some(model.decay_mask().to_vec());
        opt.fused = k == 1;
        for _ in 0..3 {
            opt.step(p, &g).unwrap();
        }
    }
    for (a, b) in ps[0].iter().zip(&ps[1]) {
        assert!(a.max_abs_diff(b) <= 1e-6);
    }
}

proptest! {
    #[test]
    fn lamb_first_step_sign_is_scale_invariant(
        w in prop::collection::vec(-1.0f32..1.0, 1..16),
        g in prop::collection::vec(-1.0f32..1.0, 16),
        c in 0.01f32..100.0,
    ) {
        let n = w.len();
        let g = &g[..n];
        let run = |scale: f32| {
            let mut p = vec![Tensor::from_vec(&[n], w.clone()).unwrap()];
            let gs = vec![Tensor::from_vec(&[n], g.iter().map(|v| v * scale).collect()).unwrap()];
            Lamb::new(0.01).step(&mut p, &gs).unwrap();
            p[0].data().iter().zip(&w).map(|(a, b)| (a - b).partial_cmp(&0.0)).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(1.0), run(c));
    }
}

#[test]
fn param_report_groups() {
    let model = BertMini::new(small_cfg(), 0).unwrap();
    let r = param_group_report(&model, DType::F32);
    assert_eq!(r.total_params(), model.num_params());
    let non_emb = r.total_params() - r.get(ParamGroup::Embedding).params;
    let dense = r.get(ParamGroup::Attention).params
        + r.get(ParamGroup::Intermediate).params
        + r.get(ParamGroup::Output).params;
    assert!(2 * dense > non_emb, "{dense} of {non_emb}");
    // 4 d×d projections + biases + layer norm per layer
    let d = 64;
    assert_eq!(r.get(ParamGroup::Attention).params, 2 * (4 * d * d + 4 * d + 2 * d));
    assert_eq!(r.total_bytes(), 4 * r.total_params());

    let h = param_group_report(&model, DType::F16);
    for g in ParamGroup::ALL {
        assert_eq!(h.get(g).grad_bytes, 2 * h.get(g).params);
    }

    let empty = BertMini::new(
        ModelConfig {
            layers: 0,
            ..small_cfg()
        },
        0,
    )
    .unwrap();
    let e = param_group_report(&empty, DType::F32);
    assert!(e.get(ParamGroup::Embedding).params > 0);
    assert!(e.get(ParamGroup::Other).params > 0);
    for g in [ParamGroup::Attention, ParamGroup::Intermediate, ParamGroup::Output] {
        assert_eq!(e.get(g), Default::default());
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut model = BertMini::new(micro_cfg(), 12).unwrap();
    let mut ts = model.tensors().to_vec();
    ts[3] = ts[3].cast(DType::F16);
    model.set_tensors(ts).unwrap();
    let bytes = checkpoint::encode(&model);
    assert_eq!(&bytes[..4], b"BCKP");
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.param_hash(), model.param_hash());
    assert_eq!(back.tensors()[3].dtype(), DType::F16);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bckp");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap().param_hash(), model.param_hash());

    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
}
