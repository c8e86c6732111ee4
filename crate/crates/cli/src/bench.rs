use std::time::Instant;

use anyhow::{bail, Result};
use deskbert::graph::{amp_rewrite, build_gelu_unfused, fuse_elementwise, interpret, DTypeTag, ExprGraph, SafetyTable, Value};
use deskbert::run;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchTarget {
    /// The seven-node GELU graph on the interpreter.
    Gelu,
    /// Single-rank training steps of the configured model.
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchArgs {
    pub target: BenchTarget,
    /// Elements per GELU evaluation.
    pub size: usize,
    /// Timed repetitions; the fastest counts.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchArgs {
    fn default() -> Self {
        BenchArgs {
            target: BenchTarget::Gelu,
            size: 1 << 20,
            reps: 5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub target: &'static str,
    pub fp16: bool,
    pub fusion: bool,
    /// Elements (GELU) or tokens (model) per timed repetition.
    pub items: u64,
    pub seconds: f64,
    pub throughput: f64,
    /// Throughput over the row with every toggle off.
    pub speedup: f64,
}

impl BenchRow {
    pub const HEADER: [&'static str; 7] = ["target", "fp16", "fusion", "items", "seconds", "throughput", "speedup"];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.target.to_string(),
            self.fp16.to_string(),
            self.fusion.to_string(),
            self.items.to_string(),
            format!("{:.6}", self.seconds),
            format!("{:.1}", self.throughput),
            format!("{:.3}", self.speedup),
        ]
    }
}

/// Every combination of the two toggles, baseline first.
pub const TOGGLES: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// The GELU graph as the interpreter runs it under the given toggles. With
/// `fp16` the input arrives in binary16 and the graph is AMP-rewritten.
pub fn gelu_variant(fp16: bool, fusion: bool) -> Result<ExprGraph> {
    let base = build_gelu_unfused();
    let mut g = if fp16 {
        let mut h = ExprGraph::new();
        h.add_input(DTypeTag::F16);
        for n in base.nodes() {
            h.push_node(n.clone())?;
        }
        h.set_outputs(base.outputs())?;
        amp_rewrite(&h, &SafetyTable::default())?
    } else {
        base
    };
    if fusion {
        g = fuse_elementwise(&g);
    }
    Ok(g)
}

fn time_gelu(args: &BenchArgs, fp16: bool, fusion: bool) -> Result<f64> {
    let g = gelu_variant(fp16, fusion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let x: Vec<f32> = (0..args.size).map(|_| rng.random_range(-10.0f32..10.0)).collect();
    let input = if fp16 {
        Value::f16(&[args.size], &x)
    } else {
        Value::f32(&[args.size], x)
    };
    let inputs = [input];
    interpret(&g, &inputs)?;
    let mut best = f64::INFINITY;
    for _ in 0..args.reps.max(1) {
        let t = Instant::now();
        let out = interpret(&g, &inputs)?;
        best = best.min(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(best)
}

fn time_model(cfg: &RunConfig, fp16: bool, fusion: bool) -> Result<(u64, f64)> {
    let mut t = cfg.train.clone();
    t.fp16 = fp16;
    t.fusion = fusion;
    t.world = 1;
    let seq = run::DataManifest::load(&cfg.data_dir)?.seq_len;
    let o = run::train(&t, &cfg.data_dir)?;
    // The first step pays for allocation and is left out.
    let timed = &o.walls[o.walls.len().min(1)..];
    if timed.is_empty() {
        bail!("model bench needs at least two steps");
    }
    let tokens = (timed.len() * t.micro_batch * t.accumulation * seq) as u64;
    Ok((tokens, timed.iter().sum()))
}

/// One row per toggle combination with speedups against the baseline row.
pub fn bench(args: &BenchArgs, cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(TOGGLES.len());
    for (fp16, fusion) in TOGGLES {
        let (target, items, seconds) = match args.target {
            BenchTarget::Gelu => ("gelu", args.size as u64, time_gelu(args, fp16, fusion)?),
            BenchTarget::Model => {
                let (items, s) = time_model(cfg, fp16, fusion)?;
                ("model", items, s)
            }
        };
        rows.push(BenchRow {
            target,
            fp16,
            fusion,
            items,
            seconds,
            throughput: items as f64 / seconds,
            speedup: 1.0,
        });
    }
    let base = rows[0].throughput;
    for r in &mut rows {
        r.speedup = r.throughput / base;
    }
    Ok(rows)
}
