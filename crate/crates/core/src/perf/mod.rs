//! Analytical model of data-parallel training time and cost on a cluster of
//! `X` machines with `Y` devices each.

mod config;

use std::fmt;

use serde::Serialize;

pub use config::{PerfConfig, PerfConfigError};

use crate::comm::{chunk_range, Topology};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterSpec {
    pub machines: usize,
    pub gpus_per_machine: usize,
    /// Tokens per second of one device.
    pub throughput: f64,
    /// Intra-machine link, bits per second.
    pub pcie_bps: f64,
    /// Inter-machine link, bits per second.
    pub net_bps: f64,
    pub params: f64,
    /// Bytes per exchanged gradient element.
    pub grad_width: usize,
}

impl ClusterSpec {
    pub fn world(&self) -> usize {
        self.machines * self.gpus_per_machine
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.machines, self.gpus_per_machine)
    }

    pub fn label(&self) -> String {
        self.topology().to_string()
    }

    pub fn grad_bytes(&self) -> f64 {
        self.params * self.grad_width as f64
    }

    pub fn with_topology(&self, t: Topology) -> ClusterSpec {
        ClusterSpec {
            machines: t.machines,
            gpus_per_machine: t.gpus_per_machine,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseConfig {
    pub seq_len: usize,
    /// Sentences per device per micro-step.
    pub sentences: usize,
    /// Micro-steps per synchronisation (K).
    pub accumulation: usize,
    pub epochs: usize,
    pub tokens_per_epoch: f64,
}

impl PhaseConfig {
    pub fn tokens_per_micro_step(&self) -> f64 {
        (self.seq_len * self.sentences) as f64
    }

    /// Sequence length 128, 32 sentences per device, 36 epochs.
    pub fn phase1() -> PhaseConfig {
        PhaseConfig {
            seq_len: 128,
            sentences: 32,
            accumulation: 4,
            epochs: 36,
            tokens_per_epoch: 16_752.7e6,
        }
    }

    /// Sequence length 512, 4 sentences per device, 4 epochs.
    pub fn phase2() -> PhaseConfig {
        PhaseConfig {
            seq_len: 512,
            sentences: 4,
            accumulation: 4,
            epochs: 4,
            tokens_per_epoch: 16_752.7e6,
        }
    }
}

/// How the intra- and inter-machine rings combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommMode {
    /// The two passes run concurrently.
    #[default]
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Knobs {
    /// Fraction ω of the last backward pass that hides communication.
    pub overlap: f64,
    /// Share of a micro-step spent in backward.
    pub bwd_share: f64,
    pub comm: CommMode,
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            overlap: 0.5,
            bwd_share: 2.0 / 3.0,
            comm: CommMode::Max,
        }
    }
}

/// Hours to process `tokens` at `throughput` tokens/s.
pub fn epoch_time(throughput: f64, tokens: f64) -> f64 {
    tokens / (throughput * SECONDS_PER_HOUR)
}

/// Seconds for a ring all-reduce of `bytes` over `n` participants.
pub fn ring_comm_time(bytes: f64, n: usize, bandwidth_bps: f64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    2.0 * (n - 1) as f64 / n as f64 * bytes * 8.0 / bandwidth_bps
}

/// Exact payload bytes `rank` sends during one ring all-reduce of `len`
/// elements of `width` bytes: every chunk twice, except the two it only
/// ever receives.
pub fn ring_bytes_sent(len: usize, width: usize, n: usize, rank: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    let skip = chunk_range(len, n, (rank + 1) % n).len() + chunk_range(len, n, (rank + 2) % n).len();
    ((2 * len - skip) * width) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationTime {
    pub t_compute: f64,
    pub t_bwd: f64,
    pub t_pcie: f64,
    pub t_net: f64,
    pub t_comm: f64,
    /// Communication left after hiding behind backward.
    pub exposed: f64,
    pub total: f64,
}

pub fn iteration_time(spec: &ClusterSpec, phase: &PhaseConfig, knobs: &Knobs) -> IterationTime {
    let micro = phase.tokens_per_micro_step() / spec.throughput;
    let t_compute = phase.accumulation as f64 * micro;
    let t_bwd = knobs.bwd_share * micro;
    let bytes = spec.grad_bytes();
    let t_pcie = ring_comm_time(bytes, spec.gpus_per_machine, spec.pcie_bps);
    let t_net = ring_comm_time(bytes, spec.machines, spec.net_bps);
    let t_comm = match knobs.comm {
        CommMode::Max => t_pcie.max(t_net),
        CommMode::Sum => t_pcie + t_net,
    };
    let exposed = (t_comm - knobs.overlap * t_bwd).max(0.0);
    IterationTime {
        t_compute,
        t_bwd,
        t_pcie,
        t_net,
        t_comm,
        exposed,
        total: t_compute + exposed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub label: String,
    pub world: usize,
    /// Cluster tokens per second.
    pub throughput: f64,
    /// `throughput / (world * single-device throughput)`.
    pub efficiency: f64,
    /// `world * efficiency`.
    pub factor: f64,
    pub time: IterationTime,
}

pub fn scaling_point(spec: &ClusterSpec, phase: &PhaseConfig, knobs: &Knobs) -> ScalingPoint {
    let time = iteration_time(spec, phase, knobs);
    let n = spec.world();
    let efficiency = time.t_compute / time.total;
    let throughput = n as f64 * spec.throughput * efficiency;
    ScalingPoint {
        label: spec.label(),
        world: n,
        throughput,
        efficiency,
        factor: n as f64 * efficiency,
        time,
    }
}

pub fn weak_scaling_curve(configs: &[(ClusterSpec, PhaseConfig)], knobs: &Knobs) -> Vec<ScalingPoint> {
    configs.iter().map(|(s, p)| scaling_point(s, p, knobs)).collect()
}

/// Every `<X>M<Y>G` with `X` in 1, 2, 4, ..., 32 and `Y` in 1, 2, 4, 8.
pub fn standard_grid() -> Vec<Topology> {
    let mut out = Vec::new();
    for x in [1, 2, 4, 8, 16, 32] {
        for y in [1, 2, 4, 8] {
            out.push(Topology::new(x, y));
        }
    }
    out
}

/// Overlap fraction implied by a bucket layout: communication can start
/// once the first bucket fills, so everything but the final bucket's share
/// of backward is available for hiding.
pub fn overlap_from_buckets(bucket_bytes: &[usize]) -> f64 {
    let total: usize = bucket_bytes.iter().sum();
    match bucket_bytes.last() {
        Some(&last) if total > 0 => 1.0 - last as f64 / total as f64,
        _ => 0.0,
    }
}

/// Money in whole cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Cents(pub u64);

impl Cents {
    pub fn from_dollars(d: u64) -> Cents {
        Cents(d * 100)
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = (self.0 / 100).to_string();
        let mut grouped = String::new();
        for (i, c) in whole.chars().enumerate() {
            if i > 0 && (whole.len() - i).is_multiple_of(3) {
                grouped.push(',');
            }
            grouped.push(c);
        }
        write!(f, "${grouped}.{:02}", self.0 % 100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostSpec {
    Cloud {
        devices: u64,
        cents_per_hour: u64,
        hours: u64,
    },
    Acquisition {
        units: u64,
        unit_price: Cents,
    },
}

pub fn cost_estimate(c: &CostSpec) -> Cents {
    match *c {
        CostSpec::Cloud {
            devices,
            cents_per_hour,
            hours,
        } => Cents(devices * cents_per_hour * hours),
        CostSpec::Acquisition { units, unit_price } => Cents(units * unit_price.0),
    }
}

/// Single-device epoch estimate for one device class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub device: String,
    pub throughput: f64,
    pub tokens_per_epoch: f64,
    pub hours_per_epoch: f64,
    pub hours_40_epochs: f64,
}

pub fn epoch_row(device: &str, throughput: f64, tokens_per_epoch: f64) -> EpochRow {
    let h = epoch_time(throughput, tokens_per_epoch);
    EpochRow {
        device: device.to_string(),
        throughput,
        tokens_per_epoch,
        hours_per_epoch: h,
        hours_40_epochs: 40.0 * h,
    }
}

/// Optimized single-device throughputs at sequence length 128.
pub const DEVICE_THROUGHPUTS: [(&str, f64); 3] = [("P100", 3228.8), ("T4", 5429.1), ("2080Ti", 10765.8)];

pub const TOKENS_PER_EPOCH: f64 = 16_752.7e6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub item: String,
    pub spec: CostSpec,
    pub total: Cents,
}

/// Cloud rental, the cluster as built, and two workstation alternatives.
pub fn standard_costs(node_price: Cents, nodes: u64) -> Vec<CostRow> {
    let rows = [
        (
            "cloud T4 x256, 12 days",
            CostSpec::Cloud {
                devices: 256,
                cents_per_hour: 35,
                hours: 12 * 24,
            },
        ),
        (
            "cluster acquisition",
            CostSpec::Acquisition {
                units: nodes,
                unit_price: node_price,
            },
        ),
        (
            "DGX-1 x32",
            CostSpec::Acquisition {
                units: 32,
                unit_price: Cents::from_dollars(149_000),
            },
        ),
        (
            "DGX-2 x32",
            CostSpec::Acquisition {
                units: 32,
                unit_price: Cents::from_dollars(399_000),
            },
        ),
    ];
    rows.into_iter()
        .map(|(item, spec)| CostRow {
            item: item.to_string(),
            total: cost_estimate(&spec),
            spec,
        })
        .collect()
}
