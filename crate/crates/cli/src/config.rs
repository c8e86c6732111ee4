use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use deskbert::comm::Exchange;
use deskbert::half::LossScaler;
use deskbert::run::{OptimizerKind, TrainConfig};
use ini::Ini;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    /// All ranks as threads of this process.
    Local,
    /// This process is one rank of a TCP group.
    Tcp,
}

/// Everything `train` and `bench` need. Read from an INI file with
/// `[model]`, `[train]`, `[seeds]`, `[data]`, `[output]` and `[comm]`
/// sections; any key can be overridden as `section.key=value`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub transport: TransportKind,
    pub rank: Option<usize>,
    pub rendezvous: Option<String>,
    /// Simulated link speed for the in-process transport.
    pub link_mbps: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            transport: TransportKind::Local,
            rank: None,
            rendezvous: None,
            link_mbps: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| anyhow!("bad value `{v}` for {key}: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => bail!("bad value `{v}` for {key}: expected true or false"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let ini = Ini::load_from_str(text).context("config syntax")?;
        let mut cfg = RunConfig::default();
        for (section, props) in &ini {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                cfg.set(&key, v)?;
            }
        }
        Ok(cfg)
    }

    /// Apply one `section.key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` is not key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "model.layers" => m.layers = parse(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.vocab" => m.vocab = parse(key, v)?,
            "model.max_positions" => m.max_positions = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.ln_eps" => m.ln_eps = parse(key, v)?,
            "train.micro_batch" => t.micro_batch = parse(key, v)?,
            "train.accumulation" => t.accumulation = parse(key, v)?,
            "train.world" => t.world = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.fp16" => t.fp16 = flag(key, v)?,
            "train.fusion" => t.fusion = flag(key, v)?,
            "train.overlap" => t.overlap = flag(key, v)?,
            "train.exchange" => {
                t.exchange = match v.trim() {
                    "f32" => Exchange::F32,
                    "f16" => Exchange::F16,
                    _ => bail!("bad value `{v}` for {key}: expected f32 or f16"),
                }
            }
            "train.bucket_bytes" => t.bucket_bytes = parse(key, v)?,
            "train.loss_scale" => {
                let s: f32 = parse(key, v)?;
                LossScaler::new(s).map_err(|e| anyhow!("bad value `{v}` for {key}: {e}"))?;
                t.loss_scale = s;
            }
            "train.optimizer" => {
                t.optimizer = match v.trim() {
                    "lamb" => OptimizerKind::Lamb,
                    "sgd" => OptimizerKind::Sgd,
                    _ => bail!("bad value `{v}` for {key}: expected lamb or sgd"),
                }
            }
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "seeds.data" => t.seeds.data = parse(key, v)?,
            "seeds.init" => t.seeds.init = parse(key, v)?,
            "seeds.dropout" => t.seeds.dropout = parse(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v.trim()),
            "output.dir" => self.out_dir = PathBuf::from(v.trim()),
            "comm.transport" => {
                self.transport = match v.trim() {
                    "local" => TransportKind::Local,
                    "tcp" => TransportKind::Tcp,
                    _ => bail!("bad value `{v}` for {key}: expected local or tcp"),
                }
            }
            "comm.rank" => self.rank = Some(parse(key, v)?),
            "comm.rendezvous" => self.rendezvous = Some(v.trim().to_string()),
            "comm.link_mbps" => self.link_mbps = Some(parse(key, v)?),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Every setting as `section.key`/value pairs, in a form [`RunConfig::set`]
    /// accepts back.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let m = &t.model;
        let mut out: Vec<(&str, String)> = vec![
            ("model.layers", m.layers.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.vocab", m.vocab.to_string()),
            ("model.max_positions", m.max_positions.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.ln_eps", m.ln_eps.to_string()),
            ("train.micro_batch", t.micro_batch.to_string()),
            ("train.accumulation", t.accumulation.to_string()),
            ("train.world", t.world.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.fp16", t.fp16.to_string()),
            ("train.fusion", t.fusion.to_string()),
            ("train.overlap", t.overlap.to_string()),
            (
                "train.exchange",
                match t.exchange {
                    Exchange::F32 => "f32",
                    Exchange::F16 => "f16",
                }
                .into(),
            ),
            ("train.bucket_bytes", t.bucket_bytes.to_string()),
            ("train.loss_scale", t.loss_scale.to_string()),
            (
                "train.optimizer",
                match t.optimizer {
                    OptimizerKind::Lamb => "lamb",
                    OptimizerKind::Sgd => "sgd",
                }
                .into(),
            ),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("seeds.data", t.seeds.data.to_string()),
            ("seeds.init", t.seeds.init.to_string()),
            ("seeds.dropout", t.seeds.dropout.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("output.dir", self.out_dir.display().to_string()),
            (
                "comm.transport",
                match self.transport {
                    TransportKind::Local => "local",
                    TransportKind::Tcp => "tcp",
                }
                .into(),
            ),
        ];
        if let Some(r) = self.rank {
            out.push(("comm.rank", r.to_string()));
        }
        if let Some(r) = &self.rendezvous {
            out.push(("comm.rendezvous", r.clone()));
        }
        if let Some(l) = self.link_mbps {
            out.push(("comm.link_mbps", l.to_string()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The configuration as an INI document.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let mut section = String::new();
        for (k, v) in self.pairs() {
            let (sec, key) = k.split_once('.').expect("qualified key");
            if sec != section {
                if !s.is_empty() {
                    s.push('\n');
                }
                s.push_str(&format!("[{sec}]\n"));
                section = sec.to_string();
            }
            s.push_str(&format!("{key} = {v}\n"));
        }
        s
    }
}
