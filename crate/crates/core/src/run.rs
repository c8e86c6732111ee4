//! End-to-end workflows shared by the command-line tool and the tests:
//! corpus preparation into shards and data-parallel training from shards.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{
    local_mesh, train_distributed, BertReplica, DataSource, EngineConfig, EventLog, Exchange, LinkDelay, RankReport,
    Transport, TrainError, Worker,
};
use crate::data::{
    encode_shard, make_examples, shard_dataset, vocab, Batch, DataError, FeistelPermutation, ShardReader,
    TrainingExample, Vocab,
};
use crate::graph::SafetyTable;
use crate::model::{BertMini, ForwardOptions, Lamb, ModelConfig, ModelError, Optimizer, Sgd};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_FILE: &str = "eval.bshd";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// The three independent sources of randomness in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            init: 2,
            dropout: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub count: u64,
}

/// Written next to the shards by [`prepare`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub source: String,
    pub seq_len: usize,
    pub max_pred: usize,
    pub seed: u64,
    /// Highest token id plus one.
    pub vocab_size: usize,
    pub examples: u64,
    pub shards: Vec<ShardEntry>,
    pub eval: ShardEntry,
}

impl DataManifest {
    pub fn load(dir: &Path) -> Result<DataManifest, RunError> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSpec {
    pub seq_len: usize,
    pub max_pred: usize,
    pub shards: usize,
    /// Examples held out for evaluation.
    pub eval: usize,
    pub seed: u64,
}

/// Pair, mask, hold out `spec.eval` examples and write the rest as shards
/// plus a manifest into `out`.
pub fn prepare(
    sentences: &[Vec<u32>],
    vocab_size: usize,
    source: &str,
    spec: &PrepareSpec,
    out: &Path,
) -> Result<DataManifest, RunError> {
    let mut examples = make_examples(sentences, spec.seq_len, spec.max_pred, spec.seed)?;
    if examples.len() <= spec.eval {
        return Err(DataError::CorpusTooSmall(sentences.len()).into());
    }
    let held = examples.split_off(examples.len() - spec.eval);
    let paths = shard_dataset(&examples, spec.shards, spec.max_pred, spec.seed, out)?;
    let mut shards = Vec::with_capacity(paths.len());
    for p in &paths {
        shards.push(ShardEntry {
            file: file_name(p),
            count: ShardReader::open(p)?.len() as u64,
        });
    }
    let refs: Vec<&TrainingExample> = held.iter().collect();
    fs::write(out.join(EVAL_FILE), encode_shard(&refs, spec.seq_len, spec.max_pred, spec.seed)?)?;
    let manifest = DataManifest {
        source: source.to_string(),
        seq_len: spec.seq_len,
        max_pred: spec.max_pred,
        seed: spec.seed,
        vocab_size,
        examples: examples.len() as u64,
        shards,
        eval: ShardEntry {
            file: EVAL_FILE.into(),
            count: held.len() as u64,
        },
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Tokenise UTF-8 text into sentences of ids, keeping the `max_vocab` most
/// frequent words.
pub fn encode_text(text: &str, max_vocab: usize) -> (Vocab, Vec<Vec<u32>>) {
    let words = vocab::tokenize(text);
    let v = Vocab::build(words.iter().map(String::as_str), max_vocab);
    let sentences = vocab::split_sentences(text)
        .iter()
        .map(|s| v.encode(s))
        .filter(|s| !s.is_empty())
        .collect();
    (v, sentences)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Examples per rank per micro-step.
    pub micro_batch: usize,
    pub accumulation: usize,
    pub world: usize,
    pub steps: usize,
    pub fp16: bool,
    pub fusion: bool,
    pub overlap: bool,
    pub exchange: Exchange,
    pub bucket_bytes: usize,
    /// Used only when `fp16` is on.
    pub loss_scale: f32,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            micro_batch: 4,
            accumulation: 1,
            world: 1,
            steps: 100,
            fp16: false,
            fusion: false,
            overlap: false,
            exchange: Exchange::F32,
            bucket_bytes: crate::comm::DEFAULT_BUCKET_BYTES,
            loss_scale: 4096.0,
            optimizer: OptimizerKind::Lamb,
            lr: 5e-3,
            weight_decay: 0.01,
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        for (name, v) in [
            ("micro_batch", self.micro_batch),
            ("accumulation", self.accumulation),
            ("world", self.world),
        ] {
            if v == 0 {
                return Err(RunError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(RunError::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Examples consumed by one optimizer step across all ranks.
    pub fn global_batch(&self) -> usize {
        self.micro_batch * self.accumulation * self.world
    }

    fn engine(&self) -> EngineConfig {
        EngineConfig {
            accumulation: self.accumulation,
            bucket_bytes: self.bucket_bytes,
            overlap: self.overlap,
            exchange: self.exchange,
            loss_scale: if self.fp16 { self.loss_scale } else { 1.0 },
            ..EngineConfig::default()
        }
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            fused: self.fusion,
            autocast: self.fp16.then(SafetyTable::default),
            dropout_seed: (self.model.dropout > 0.0).then_some(self.seeds.dropout),
        }
    }

    fn optimizer(&self, model: &BertMini) -> Box<dyn Optimizer + Send> {
        match self.optimizer {
            OptimizerKind::Sgd => Box::new(Sgd { lr: self.lr }),
            OptimizerKind::Lamb => {
                let mut l = Lamb::new(self.lr);
                l.weight_decay = self.weight_decay;
                l.decay_mask = Some(model.decay_mask().to_vec());
                l.fused = self.fusion;
                Box::new(l)
            }
        }
    }
}

/// One rank's examples, replayed epoch after epoch in a seeded order.
/// Micro-step `i` takes the `i`-th run of `micro_batch` examples.
struct EpochSource {
    examples: Vec<TrainingExample>,
    micro_batch: usize,
    accumulation: usize,
    seed: u64,
}

impl DataSource for EpochSource {
    fn batch(&self, _rank: usize, step: usize, micro: usize) -> Result<Batch, DataError> {
        let n = self.examples.len() as u64;
        let first = ((step * self.accumulation + micro) * self.micro_batch) as u64;
        let mut perm: Option<(u64, FeistelPermutation)> = None;
        let mut picked = Vec::with_capacity(self.micro_batch);
        for j in first..first + self.micro_batch as u64 {
            let epoch = j / n;
            if perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
                perm = Some((epoch, FeistelPermutation::new(n, self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))));
            }
            let (_, p) = perm.as_ref().expect("set above");
            picked.push(self.examples[p.apply(j % n) as usize].clone());
        }
        Batch::from_examples(&picked)
    }
}

/// Shards `rank`, `rank + world`, ... of a prepared directory.
pub fn rank_examples(dir: &Path, manifest: &DataManifest, rank: usize, world: usize) -> Result<Vec<TrainingExample>, RunError> {
    if manifest.shards.len() < world {
        return Err(RunError::Invalid(format!(
            "{} shards cannot feed {world} ranks",
            manifest.shards.len()
        )));
    }
    let mut out = Vec::new();
    for s in manifest.shards.iter().skip(rank).step_by(world) {
        out.extend(ShardReader::open(&dir.join(&s.file))?.read_all()?);
    }
    if out.is_empty() {
        return Err(RunError::Invalid(format!("rank {rank} has no examples")));
    }
    Ok(out)
}

pub fn eval_batch(dir: &Path, manifest: &DataManifest) -> Result<Batch, RunError> {
    let ex = ShardReader::open(&dir.join(&manifest.eval.file))?.read_all()?;
    Ok(Batch::from_examples(&ex)?)
}

/// Dropout-free FP32 loss on the held-out examples.
pub fn evaluate(model: &BertMini, batch: &Batch) -> Result<f32, RunError> {
    Ok(model.eval_loss(batch, &ForwardOptions::default())?)
}

fn initial_model(cfg: &TrainConfig, manifest: &DataManifest) -> Result<BertMini, RunError> {
    cfg.validate()?;
    if manifest.vocab_size > cfg.model.vocab {
        return Err(RunError::Invalid(format!(
            "data uses {} token ids but the model vocabulary has {}",
            manifest.vocab_size, cfg.model.vocab
        )));
    }
    if manifest.seq_len > cfg.model.max_positions {
        return Err(RunError::Invalid(format!(
            "sequence length {} exceeds max_positions {}",
            manifest.seq_len, cfg.model.max_positions
        )));
    }
    Ok(BertMini::new(cfg.model.clone(), cfg.seeds.init)?)
}

fn replica(cfg: &TrainConfig, dir: &Path, manifest: &DataManifest, rank: usize) -> Result<BertReplica, RunError> {
    let model = initial_model(cfg, manifest)?;
    let source = EpochSource {
        examples: rank_examples(dir, manifest, rank, cfg.world)?,
        micro_batch: cfg.micro_batch,
        accumulation: cfg.accumulation,
        seed: cfg.seeds.data ^ ((rank as u64) << 32),
    };
    let opt = cfg.optimizer(&model);
    Ok(BertReplica::new(rank, model, opt, Arc::new(source), cfg.forward_options()))
}

pub struct TrainOutcome {
    pub ranks: Vec<RankReport>,
    /// Per step, the mean of the ranks' losses.
    pub losses: Vec<f32>,
    /// Per step, the slowest rank's wall time in seconds.
    pub walls: Vec<f64>,
    pub initial_eval: f32,
    pub final_eval: f32,
    /// Rank 0's replica after the last step.
    pub model: BertMini,
    pub log: EventLog,
}

impl TrainOutcome {
    /// Every rank reported the same parameter hash at every step.
    pub fn replicas_consistent(&self) -> bool {
        self.ranks
            .iter()
            .flat_map(|r| &r.steps)
            .all(|s| s.hashes.iter().all(|&h| h == s.hashes[0]))
    }

    fn from_reports(ranks: Vec<RankReport>, model: BertMini, initial: f32, eval: &Batch, log: EventLog) -> Result<Self, RunError> {
        let steps = ranks.first().map_or(0, |r| r.steps.len());
        let losses = (0..steps)
            .map(|s| (ranks.iter().map(|r| r.steps[s].loss as f64).sum::<f64>() / ranks.len() as f64) as f32)
            .collect();
        let walls = (0..steps)
            .map(|s| ranks.iter().map(|r| r.steps[s].wall).fold(0.0, f64::max))
            .collect();
        Ok(TrainOutcome {
            ranks,
            losses,
            walls,
            initial_eval: initial,
            final_eval: evaluate(&model, eval)?,
            model,
            log,
        })
    }
}

/// Train `cfg.world` in-process ranks on a prepared shard directory.
pub fn train(cfg: &TrainConfig, dir: &Path) -> Result<TrainOutcome, RunError> {
    train_with_delay(cfg, dir, LinkDelay::default())
}

pub fn train_with_delay(cfg: &TrainConfig, dir: &Path, delay: LinkDelay) -> Result<TrainOutcome, RunError> {
    let manifest = DataManifest::load(dir)?;
    let eval = eval_batch(dir, &manifest)?;
    let initial = evaluate(&initial_model(cfg, &manifest)?, &eval)?;
    let replicas = (0..cfg.world)
        .map(|r| replica(cfg, dir, &manifest, r))
        .collect::<Result<Vec<_>, _>>()?;
    let log = EventLog::new();
    let transports = local_mesh(cfg.world, delay, EngineConfig::default().timeout);
    let out = train_distributed(replicas, transports, &cfg.engine(), cfg.steps, &log)?;
    let mut ranks = Vec::with_capacity(out.len());
    let mut model = None;
    for (report, rep) in out {
        if report.rank == 0 {
            model = Some(rep.into_model());
        }
        ranks.push(report);
    }
    let model = model.ok_or_else(|| RunError::Invalid("no rank 0".into()))?;
    TrainOutcome::from_reports(ranks, model, initial, &eval, log)
}

/// Train this process's rank over an external transport (one process per
/// rank).
pub fn train_rank(
    cfg: &TrainConfig,
    dir: &Path,
    transport: Box<dyn Transport>,
    log: &EventLog,
) -> Result<TrainOutcome, RunError> {
    if transport.world() != cfg.world {
        return Err(RunError::Invalid(format!(
            "transport has {} ranks, config asks for {}",
            transport.world(),
            cfg.world
        )));
    }
    let manifest = DataManifest::load(dir)?;
    let eval = eval_batch(dir, &manifest)?;
    let initial = evaluate(&initial_model(cfg, &manifest)?, &eval)?;
    let rank = transport.rank();
    let mut worker = Worker::new(replica(cfg, dir, &manifest, rank)?, transport, cfg.engine(), log.clone())?;
    let report = worker.run(cfg.steps)?;
    let model = worker.into_replica().into_model();
    TrainOutcome::from_reports(vec![report], model, initial, &eval, log.clone())
}

/// Shard files of a prepared directory, in manifest order.
pub fn shard_paths(dir: &Path, manifest: &DataManifest) -> Vec<PathBuf> {
    manifest.shards.iter().map(|s| dir.join(&s.file)).collect()
}
