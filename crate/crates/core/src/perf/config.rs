use std::fmt::Display;
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

use super::{standard_grid, Cents, ClusterSpec, CommMode, Knobs, PhaseConfig};
use crate::comm::Topology;

#[derive(Debug, Error)]
pub enum PerfConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
}

/// Everything a sweep needs. Read from `[cluster]`, `[phase]`, `[model]`
/// and `[sweep]` sections of `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfConfig {
    pub cluster: ClusterSpec,
    pub phase: PhaseConfig,
    pub knobs: Knobs,
    pub topologies: Vec<Topology>,
    pub node_price: Cents,
}

impl Default for PerfConfig {
    fn default() -> Self {
        PerfConfig {
            cluster: ClusterSpec {
                machines: 1,
                gpus_per_machine: 1,
                throughput: 5429.1,
                pcie_bps: 64e9,
                net_bps: 10e9,
                params: 340e6,
                grad_width: 4,
            },
            phase: PhaseConfig::phase1(),
            knobs: Knobs::default(),
            topologies: standard_grid(),
            node_price: Cents::from_dollars(19_500),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, PerfConfigError>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e: T::Err| PerfConfigError::BadValue {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn positive(key: &str, v: f64) -> Result<f64, PerfConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(PerfConfigError::BadValue {
            key: key.to_string(),
            msg: format!("{v} is not positive"),
        })
    }
}

impl PerfConfig {
    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<PerfConfig, PerfConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| PerfConfigError::Syntax(e.to_string()))?;
        let mut cfg = PerfConfig::default();
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

    /// Set one `section.key`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PerfConfigError> {
        let c = &mut self.cluster;
        let p = &mut self.phase;
        match key {
            "cluster.throughput" => c.throughput = positive(key, num(key, v)?)?,
            "cluster.pcie_gbps" => c.pcie_bps = positive(key, num(key, v)?)? * 1e9,
            "cluster.net_gbps" => c.net_bps = positive(key, num(key, v)?)? * 1e9,
            "cluster.params" => c.params = positive(key, num(key, v)?)?,
            "cluster.exchange" => {
                c.grad_width = match v.trim() {
                    "f32" => 4,
                    "f16" => 2,
                    other => {
                        return Err(PerfConfigError::BadValue {
                            key: key.into(),
                            msg: format!("`{other}` is not f32 or f16"),
                        })
                    }
                }
            }
            "phase.seq_len" => p.seq_len = num(key, v)?,
            "phase.sentences" => p.sentences = num(key, v)?,
            "phase.accumulation" => p.accumulation = num(key, v)?,
            "phase.epochs" => p.epochs = num(key, v)?,
            "phase.tokens_per_epoch" => p.tokens_per_epoch = positive(key, num(key, v)?)?,
            "model.overlap" => {
                let w: f64 = num(key, v)?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(PerfConfigError::BadValue {
                        key: key.into(),
                        msg: format!("{w} not in [0, 1]"),
                    });
                }
                self.knobs.overlap = w;
            }
            "model.bwd_share" => self.knobs.bwd_share = positive(key, num(key, v)?)?,
            "model.comm" => {
                self.knobs.comm = match v.trim() {
                    "max" => CommMode::Max,
                    "sum" => CommMode::Sum,
                    other => {
                        return Err(PerfConfigError::BadValue {
                            key: key.into(),
                            msg: format!("`{other}` is not max or sum"),
                        })
                    }
                }
            }
            "sweep.topologies" => {
                self.topologies = v
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<Topology>().map_err(|e| PerfConfigError::BadValue {
                            key: key.into(),
                            msg: e.to_string(),
                        })
                    })
                    .collect::<Result<_, _>>()?;
            }
            "sweep.node_price" => {
                let d: f64 = positive(key, num(key, v)?)?;
                self.node_price = Cents((d * 100.0).round() as u64);
            }
            _ => return Err(PerfConfigError::UnknownKey(key.to_string())),
        }
        for (name, n) in [("phase.seq_len", p.seq_len), ("phase.sentences", p.sentences), ("phase.accumulation", p.accumulation)] {
            if n == 0 {
                return Err(PerfConfigError::BadValue {
                    key: name.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        Ok(())
    }

    /// The configured cluster at each sweep topology.
    pub fn specs(&self) -> Vec<(ClusterSpec, PhaseConfig)> {
        self.topologies
            .iter()
            .map(|&t| (self.cluster.with_topology(t), self.phase))
            .collect()
    }
}
