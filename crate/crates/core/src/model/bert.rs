use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, ParamGroup};
use crate::data::vocab::PAD;
use crate::data::Batch;
use crate::graph::SafetyTable;
use crate::tensor::kernels::{GELU_A, GELU_B, GELU_C};
use crate::tensor::{Tape, Tensor, Var};

/// How a forward pass is executed.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Single-op GELU and layer norm instead of their primitive chains.
    pub fused: bool,
    /// Mixed precision: run ops in the dtype chosen by this table.
    pub autocast: Option<SafetyTable>,
    /// Dropout seed; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

/// Handles into a tape after a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub loss: Var,
    pub mlm_loss: Option<Var>,
    pub nsp_loss: Var,
    pub mlm_logits: Option<Var>,
    pub nsp_logits: Var,
    /// Parameter leaves in registration order.
    pub params: Vec<Var>,
}

/// Gradients of one backward pass, in parameter order.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f32,
    pub grads: Vec<Tensor>,
}

struct Slots {
    word: usize,
    pos: usize,
    seg: usize,
    emb_ln: usize,
    layers: Vec<usize>,
    mlm: usize,
    pooler: usize,
}

const PER_LAYER: usize = 16;

/// Tiny BERT encoder with masked-LM and next-sentence heads.
pub struct BertMini {
    cfg: ModelConfig,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    decay: Vec<bool>,
    tensors: Vec<Tensor>,
    slots: Slots,
}

impl BertMini {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<BertMini, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
        let mut m = BertMini {
            names: Vec::new(),
            groups: Vec::new(),
            decay: Vec::new(),
            tensors: Vec::new(),
            slots: Slots {
                word: 0,
                pos: 0,
                seg: 0,
                emb_ln: 0,
                layers: Vec::new(),
                mlm: 0,
                pooler: 0,
            },
            cfg,
        };
        let (d, v, i, npos) = (m.cfg.hidden, m.cfg.vocab, m.cfg.intermediate(), m.cfg.max_positions);
        let mut add = |m: &mut BertMini, name: String, shape: &[usize], group, init: Init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Random => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            m.names.push(name);
            m.groups.push(group);
            m.decay.push(matches!(init, Init::Random));
            m.tensors.push(Tensor::from_vec(shape, data).expect("non-empty shape"));
            m.tensors.len() - 1
        };
        use Init::*;
        use ParamGroup::*;
        m.slots.word = add(&mut m, "embeddings.word".into(), &[v, d], Embedding, Random);
        m.slots.pos = add(&mut m, "embeddings.position".into(), &[npos, d], Embedding, Random);
        m.slots.seg = add(&mut m, "embeddings.segment".into(), &[2, d], Embedding, Random);
        m.slots.emb_ln = add(&mut m, "embeddings.ln.gamma".into(), &[d], Embedding, Ones);
        add(&mut m, "embeddings.ln.beta".into(), &[d], Embedding, Zeros);
        for l in 0..m.cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let first = add(&mut m, p("attention.query.w"), &[d, d], Attention, Random);
            add(&mut m, p("attention.query.b"), &[d], Attention, Zeros);
            add(&mut m, p("attention.key.w"), &[d, d], Attention, Random);
            add(&mut m, p("attention.key.b"), &[d], Attention, Zeros);
            add(&mut m, p("attention.value.w"), &[d, d], Attention, Random);
            add(&mut m, p("attention.value.b"), &[d], Attention, Zeros);
            add(&mut m, p("attention.out.w"), &[d, d], Attention, Random);
            add(&mut m, p("attention.out.b"), &[d], Attention, Zeros);
            add(&mut m, p("attention.ln.gamma"), &[d], Attention, Ones);
            add(&mut m, p("attention.ln.beta"), &[d], Attention, Zeros);
            add(&mut m, p("intermediate.w"), &[d, i], Intermediate, Random);
            add(&mut m, p("intermediate.b"), &[i], Intermediate, Zeros);
            add(&mut m, p("output.w"), &[i, d], Output, Random);
            add(&mut m, p("output.b"), &[d], Output, Zeros);
            add(&mut m, p("output.ln.gamma"), &[d], Output, Ones);
            add(&mut m, p("output.ln.beta"), &[d], Output, Zeros);
            m.slots.layers.push(first);
        }
        m.slots.mlm = add(&mut m, "mlm.dense.w".into(), &[d, d], Other, Random);
        add(&mut m, "mlm.dense.b".into(), &[d], Other, Zeros);
        add(&mut m, "mlm.ln.gamma".into(), &[d], Other, Ones);
        add(&mut m, "mlm.ln.beta".into(), &[d], Other, Zeros);
        add(&mut m, "mlm.bias".into(), &[v], Other, Zeros);
        m.slots.pooler = add(&mut m, "nsp.pooler.w".into(), &[d, d], Other, Random);
        add(&mut m, "nsp.pooler.b".into(), &[d], Other, Zeros);
        add(&mut m, "nsp.classifier.w".into(), &[d, 2], Other, Random);
        add(&mut m, "nsp.classifier.b".into(), &[2], Other, Zeros);
        debug_assert_eq!(m.slots.layers.iter().map(|_| PER_LAYER).sum::<usize>() + 14, m.tensors.len());
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Which parameters take weight decay (matrices and embeddings).
    pub fn decay_mask(&self) -> &[bool] {
        &self.decay
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replace all parameters, checking names and shapes line up.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<(), ModelError> {
        if tensors.len() != self.tensors.len()
            || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::InvalidConfig("parameter shapes do not match the model".into()));
        }
        self.tensors = tensors;
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn param_hash(&self) -> u64 {
        hash_tensors(&self.tensors)
    }

    /// Record the forward pass on `tape`. Parameters are registered first,
    /// so parameter `i` is leaf `i` of a fresh tape.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, opts: &ForwardOptions) -> Result<Forward, ModelError> {
        let cfg = &self.cfg;
        let (b, s, d, h) = (batch.size, batch.seq_len, cfg.hidden, cfg.heads);
        if s > cfg.max_positions {
            return Err(ModelError::InvalidConfig(format!(
                "sequence length {s} exceeds {} positions",
                cfg.max_positions
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(ModelError::InvalidConfig(format!("token id {bad} outside vocab {}", cfg.vocab)));
        }
        let params: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let mut fw = Builder {
            tape,
            opts,
            eps: cfg.ln_eps,
            rate: cfg.dropout,
            site: 0,
        };
        let p = |i: usize| params[i];

        let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..b * s).map(|i| i % s).collect();
        let segs: Vec<usize> = batch.segments.iter().map(|&t| t as usize).collect();
        let we = fw.tape.gather_rows(p(self.slots.word), &ids)?;
        let pe = fw.tape.gather_rows(p(self.slots.pos), &positions)?;
        let se = fw.tape.gather_rows(p(self.slots.seg), &segs)?;
        let x = fw.tape.add(we, pe)?;
        let x = fw.tape.add(x, se)?;
        let x = fw.layer_norm(x, p(self.slots.emb_ln), p(self.slots.emb_ln + 1))?;
        let mut x = fw.dropout(x)?;

        let mask = if batch.ids.contains(&PAD) {
            let mut m = Vec::with_capacity(b * h * s);
            for e in 0..b {
                let row: Vec<f32> = batch.ids[e * s..(e + 1) * s]
                    .iter()
                    .map(|&t| if t == PAD { -10_000.0 } else { 0.0 })
                    .collect();
                for _ in 0..h {
                    m.extend_from_slice(&row);
                }
            }
            Some(fw.tape.constant(Tensor::from_vec(&[b * h, 1, s], m)?))
        } else {
            None
        };

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        for &base in &self.slots.layers {
            let w = |k: usize| p(base + k);
            let split = |fw: &mut Builder, t: Var| -> Result<Var, ModelError> {
                let t = fw.tape.reshape(t, &[b, s, h, dh])?;
                let t = fw.tape.permute(t, &[0, 2, 1, 3])?;
                Ok(fw.tape.reshape(t, &[b * h, s, dh])?)
            };
            let q = fw.linear(x, w(0), w(1))?;
            let k = fw.linear(x, w(2), w(3))?;
            let v = fw.linear(x, w(4), w(5))?;
            let (q, k, v) = (split(&mut fw, q)?, split(&mut fw, k)?, split(&mut fw, v)?);
            let scores = fw.tape.matmul_nt(q, k)?;
            let mut scores = fw.tape.scalar_mul(scores, scale)?;
            if let Some(m) = mask {
                scores = fw.tape.add(scores, m)?;
            }
            let probs = fw.tape.softmax(scores)?;
            let probs = fw.dropout(probs)?;
            let ctx = fw.tape.matmul(probs, v)?;
            let ctx = fw.tape.reshape(ctx, &[b, h, s, dh])?;
            let ctx = fw.tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = fw.tape.reshape(ctx, &[b * s, d])?;
            let a = fw.linear(ctx, w(6), w(7))?;
            let a = fw.dropout(a)?;
            let a = fw.tape.add(x, a)?;
            x = fw.layer_norm(a, w(8), w(9))?;

            let f = fw.linear(x, w(10), w(11))?;
            let f = fw.gelu(f)?;
            let f = fw.linear(f, w(12), w(13))?;
            let f = fw.dropout(f)?;
            let f = fw.tape.add(x, f)?;
            x = fw.layer_norm(f, w(14), w(15))?;
        }

        let (mlm_logits, mlm_loss) = if batch.mask_positions.is_empty() {
            (None, None)
        } else {
            let m = fw.tape.gather_rows(x, &batch.mask_positions)?;
            let m = fw.linear(m, p(self.slots.mlm), p(self.slots.mlm + 1))?;
            let m = fw.gelu(m)?;
            let m = fw.layer_norm(m, p(self.slots.mlm + 2), p(self.slots.mlm + 3))?;
            let logits = fw.tape.matmul_nt(m, p(self.slots.word))?;
            let logits = fw.tape.add(logits, p(self.slots.mlm + 4))?;
            let loss = fw.tape.cross_entropy(logits, &batch.mask_labels)?;
            (Some(logits), Some(loss))
        };

        let cls: Vec<usize> = (0..b).map(|e| e * s).collect();
        let c = fw.tape.gather_rows(x, &cls)?;
        let c = fw.linear(c, p(self.slots.pooler), p(self.slots.pooler + 1))?;
        let c = fw.tape.tanh(c)?;
        let nsp_logits = fw.linear(c, p(self.slots.pooler + 2), p(self.slots.pooler + 3))?;
        let labels: Vec<usize> = batch.is_next.iter().map(|&n| n as usize).collect();
        let nsp_loss = fw.tape.cross_entropy(nsp_logits, &labels)?;
        let loss = match mlm_loss {
            Some(m) => fw.tape.add(m, nsp_loss)?,
            None => nsp_loss,
        };
        let loss = fw.tape.cast(loss, crate::tensor::DType::F32);
        Ok(Forward {
            loss,
            mlm_loss,
            nsp_loss,
            mlm_logits,
            nsp_logits,
            params,
        })
    }

    /// Forward and backward in one call. The backward pass is seeded with
    /// `loss_scale`; gradients are returned still scaled. `on_ready` fires
    /// with each parameter index as soon as its gradient is final.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        opts: &ForwardOptions,
        loss_scale: f32,
        mut on_ready: impl FnMut(usize, &Tensor),
    ) -> Result<LossAndGrads, ModelError> {
        let mut tape = match &opts.autocast {
            Some(t) => Tape::with_autocast(t.clone()),
            None => Tape::new(),
        };
        let f = self.forward(&mut tape, batch, opts)?;
        let loss = tape.value(f.loss).item();
        let mut grads = tape.backward_with(f.loss, loss_scale, |v, g| on_ready(v.index(), g))?;
        let grads = f
            .params
            .iter()
            .map(|&v| grads.take(v).expect("every parameter gets a gradient"))
            .collect();
        Ok(LossAndGrads { loss, grads })
    }

    /// Loss only, without dropout.
    pub fn eval_loss(&self, batch: &Batch, opts: &ForwardOptions) -> Result<f32, ModelError> {
        let mut tape = match &opts.autocast {
            Some(t) => Tape::with_autocast(t.clone()),
            None => Tape::new(),
        };
        let o = ForwardOptions {
            dropout_seed: None,
            ..opts.clone()
        };
        let f = self.forward(&mut tape, batch, &o)?;
        Ok(tape.value(f.loss).item())
    }
}

/// FNV-1a over the bit patterns of a tensor list.
pub fn hash_tensors(ts: &[Tensor]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in ts {
        for v in t.data() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

enum Init {
    Random,
    Zeros,
    Ones,
}

struct Builder<'a> {
    tape: &'a mut Tape,
    opts: &'a ForwardOptions,
    eps: f32,
    rate: f32,
    site: u64,
}

impl Builder<'_> {
    fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let Some(seed) = self.opts.dropout_seed else {
            return Ok(x);
        };
        if self.rate == 0.0 {
            return Ok(x);
        }
        self.site += 1;
        let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.site;
        Ok(self.tape.dropout(x, self.rate, s)?)
    }

    fn gelu(&mut self, x: Var) -> Result<Var, ModelError> {
        if self.opts.fused {
            return Ok(self.tape.gelu(x)?);
        }
        let t = &mut *self.tape;
        let f = t.pow(x, 3.0)?;
        let f = t.scalar_mul(f, GELU_C)?;
        let f = t.add(x, f)?;
        let f = t.scalar_mul(f, GELU_B)?;
        let f = t.tanh(f)?;
        let f = t.add_scalar(f, 1.0)?;
        let f = t.mul(x, f)?;
        Ok(t.scalar_mul(f, GELU_A)?)
    }

    fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, ModelError> {
        let t = &mut *self.tape;
        let n = if self.opts.fused {
            t.layer_norm(x, self.eps)?
        } else {
            let mean = t.mean_last(x)?;
            let c = t.sub(x, mean)?;
            let sq = t.mul(c, c)?;
            let var = t.mean_last(sq)?;
            let var = t.add_scalar(var, self.eps)?;
            let r = t.pow(var, -0.5)?;
            t.mul(c, r)?
        };
        let y = t.mul(n, gamma)?;
        Ok(t.add(y, beta)?)
    }
}
