use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use deskbert::comm::{rendezvous_from_env, EngineConfig, EventLog, LinkDelay, TcpTransport};
use deskbert::model::checkpoint;
use deskbert::run::{self, DataManifest, Seeds, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TransportKind};
use crate::write_csv;

pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bckp";
pub const RUN_MANIFEST_FILE: &str = "run.json";

pub fn event_file(rank: usize) -> String {
    format!("events-rank{rank}.jsonl")
}

/// Summary written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seeds: Seeds,
    pub config: BTreeMap<String, String>,
    pub data_source: String,
    pub examples: u64,
    /// Ranks trained by this process.
    pub ranks: Vec<usize>,
    pub steps: usize,
    pub global_batch: usize,
    pub initial_eval: f32,
    pub final_eval: f32,
    pub final_loss: Option<f32>,
    pub replicas_consistent: bool,
    pub param_hash: u64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f32,
    pub wall_seconds: f64,
    pub elapsed_seconds: f64,
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// Train as configured and write loss CSV, per-rank event logs, a
/// checkpoint and the run manifest into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    let data = DataManifest::load(&cfg.data_dir)
        .with_context(|| format!("loading prepared data from {}", cfg.data_dir.display()))?;
    let (outcome, ranks) = match cfg.transport {
        TransportKind::Local => {
            let delay = cfg.link_mbps.map_or(LinkDelay::default(), |m| LinkDelay::bandwidth(m * 1e6));
            let o = run::train_with_delay(&cfg.train, &cfg.data_dir, delay)?;
            (o, (0..cfg.train.world).collect::<Vec<_>>())
        }
        TransportKind::Tcp => {
            let rank = cfg.rank.context("TCP transport needs comm.rank")?;
            let addrs = rendezvous_from_env(cfg.rendezvous.as_deref())?
                .context("TCP transport needs comm.rendezvous or the rendezvous environment variable")?;
            let t = TcpTransport::connect(rank, &addrs, EngineConfig::default().timeout)?;
            let log = EventLog::new();
            let o = run::train_rank(&cfg.train, &cfg.data_dir, Box::new(t), &log)?;
            (o, vec![rank])
        }
    };
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let manifest = write_outputs(cfg, &data, &outcome, &ranks)?;
    validate(&cfg.out_dir, &outcome, &manifest)?;
    Ok(TrainRun {
        outcome,
        manifest,
        out_dir: cfg.out_dir.clone(),
    })
}

fn write_outputs(cfg: &RunConfig, data: &DataManifest, o: &TrainOutcome, ranks: &[usize]) -> Result<RunManifest> {
    let out = &cfg.out_dir;
    let mut elapsed = 0.0;
    let rows: Vec<Vec<String>> = o
        .losses
        .iter()
        .zip(&o.walls)
        .enumerate()
        .map(|(step, (loss, wall))| {
            elapsed += wall;
            vec![step.to_string(), loss.to_string(), wall.to_string(), elapsed.to_string()]
        })
        .collect();
    write_csv(&out.join(LOSS_FILE), &["step", "loss", "wall_seconds", "elapsed_seconds"], &rows)?;
    let mut files = vec![LOSS_FILE.to_string()];
    for &r in ranks {
        let name = event_file(r);
        o.log.save_jsonl(&out.join(&name), Some(r))?;
        files.push(name);
    }
    checkpoint::save(&o.model, &out.join(CHECKPOINT_FILE))?;
    files.push(CHECKPOINT_FILE.into());
    files.push(RUN_MANIFEST_FILE.into());
    let manifest = RunManifest {
        seeds: cfg.train.seeds,
        config: cfg.pairs().into_iter().collect(),
        data_source: data.source.clone(),
        examples: data.examples,
        ranks: ranks.to_vec(),
        steps: o.losses.len(),
        global_batch: cfg.train.global_batch(),
        initial_eval: o.initial_eval,
        final_eval: o.final_eval,
        final_loss: o.losses.last().copied(),
        replicas_consistent: o.replicas_consistent(),
        param_hash: o.model.param_hash(),
        files,
    };
    fs::write(out.join(RUN_MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Read everything back and compare it with what was trained.
fn validate(out: &Path, o: &TrainOutcome, m: &RunManifest) -> Result<()> {
    let rows = read_loss_csv(&out.join(LOSS_FILE))?;
    ensure!(rows.len() == o.losses.len(), "loss CSV has {} rows, trained {} steps", rows.len(), o.losses.len());
    for (i, (row, &loss)) in rows.iter().zip(&o.losses).enumerate() {
        ensure!(row.step == i, "loss CSV row {i} is step {}", row.step);
        ensure!(
            row.loss.to_bits() == loss.to_bits(),
            "loss CSV step {i} reads back {} instead of {loss}",
            row.loss
        );
    }
    for &r in &m.ranks {
        let text = fs::read_to_string(out.join(event_file(r)))?;
        for line in text.lines() {
            serde_json::from_str::<deskbert::comm::Event>(line).with_context(|| format!("rank {r} event log"))?;
        }
    }
    let restored = checkpoint::load(&out.join(CHECKPOINT_FILE))?;
    ensure!(restored.param_hash() == m.param_hash, "checkpoint does not reload to the trained weights");
    let back: RunManifest = serde_json::from_slice(&fs::read(out.join(RUN_MANIFEST_FILE))?)?;
    if back.seeds != m.seeds || back.steps != m.steps {
        bail!("run manifest does not read back");
    }
    ensure!(m.replicas_consistent, "replicas diverged");
    Ok(())
}
