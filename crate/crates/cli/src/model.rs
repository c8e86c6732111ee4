use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use deskbert::perf::{
    epoch_row, standard_costs, weak_scaling_curve, CostRow, EpochRow, PerfConfig, ScalingPoint, DEVICE_THROUGHPUTS,
    TOKENS_PER_EPOCH,
};

use crate::write_csv;

pub const SCALING_FILE: &str = "scaling.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const COSTS_FILE: &str = "costs.csv";

/// Machines in the cluster whose acquisition cost is tabulated.
pub const CLUSTER_NODES: u64 = 32;

pub struct ModelReport {
    pub scaling: Vec<ScalingPoint>,
    pub epochs: Vec<EpochRow>,
    pub costs: Vec<CostRow>,
}

pub fn model(cfg: &PerfConfig) -> ModelReport {
    ModelReport {
        scaling: weak_scaling_curve(&cfg.specs(), &cfg.knobs),
        epochs: DEVICE_THROUGHPUTS
            .iter()
            .map(|&(d, t)| epoch_row(d, t, TOKENS_PER_EPOCH))
            .collect(),
        costs: standard_costs(cfg.node_price, CLUSTER_NODES),
    }
}

/// Write the three CSV tables into `out`.
pub fn write_report(r: &ModelReport, cfg: &PerfConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scaling: Vec<Vec<String>> = r
        .scaling
        .iter()
        .zip(&cfg.topologies)
        .map(|(p, t)| {
            let machines = t.machines as u64;
            vec![
                p.label.clone(),
                t.machines.to_string(),
                t.gpus_per_machine.to_string(),
                p.world.to_string(),
                cfg.phase.accumulation.to_string(),
                format!("{:.3}", p.throughput),
                format!("{:.6}", p.efficiency),
                format!("{:.3}", p.factor),
                format!("{:.6}", p.time.t_compute),
                format!("{:.6}", p.time.t_pcie),
                format!("{:.6}", p.time.t_net),
                format!("{:.6}", p.time.exposed),
                format!("{:.6}", p.time.total),
                deskbert::perf::Cents(cfg.node_price.0 * machines).to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join(SCALING_FILE),
        &[
            "label",
            "machines",
            "gpus_per_machine",
            "world",
            "accumulation",
            "throughput",
            "efficiency",
            "factor",
            "t_compute",
            "t_pcie",
            "t_net",
            "t_exposed",
            "t_total",
            "hardware_cost",
        ],
        &scaling,
    )?;
    let epochs: Vec<Vec<String>> = r
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.device.clone(),
                e.throughput.to_string(),
                e.tokens_per_epoch.to_string(),
                format!("{:.1}", e.hours_per_epoch),
                format!("{:.1}", e.hours_40_epochs),
            ]
        })
        .collect();
    write_csv(
        &out.join(EPOCHS_FILE),
        &["device", "throughput", "tokens_per_epoch", "hours_per_epoch", "hours_40_epochs"],
        &epochs,
    )?;
    let costs: Vec<Vec<String>> = r
        .costs
        .iter()
        .map(|c| vec![c.item.clone(), c.total.0.to_string(), c.total.to_string()])
        .collect();
    write_csv(&out.join(COSTS_FILE), &["item", "cents", "total"], &costs)?;
    Ok(())
}
