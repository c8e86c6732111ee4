use std::thread;
use std::time::Duration;

use deskbert::comm::{
    local_mesh, ring_allreduce, train_distributed, BucketPlan, EngineConfig, EventLog, LinkDelay, SimulatedReplica,
    Topology, Transport,
};
use deskbert::perf::{
    cost_estimate, epoch_row, epoch_time, iteration_time, overlap_from_buckets, ring_bytes_sent, ring_comm_time,
    scaling_point, standard_costs, standard_grid, weak_scaling_curve, Cents, ClusterSpec, CommMode, CostSpec, Knobs,
    PerfConfig, PhaseConfig, DEVICE_THROUGHPUTS, TOKENS_PER_EPOCH,
};
use proptest::prelude::*;

fn cluster(x: usize, y: usize) -> ClusterSpec {
    ClusterSpec {
        machines: x,
        gpus_per_machine: y,
        ..PerfConfig::default().cluster
    }
}

fn phase(k: usize) -> PhaseConfig {
    PhaseConfig {
        accumulation: k,
        ..PhaseConfig::phase1()
    }
}

#[test]
fn single_device_epoch_estimates() {
    let table = [(3228.8, 1441.6), (5429.1, 857.1), (10765.8, 432.3)];
    for ((thr, hours), (_, dev)) in table.iter().zip(DEVICE_THROUGHPUTS) {
        assert_eq!(*thr, dev);
        let h = epoch_time(*thr, TOKENS_PER_EPOCH);
        assert!(((h - hours) / hours).abs() < 0.005, "{h} vs {hours}");
        let row = epoch_row("x", *thr, TOKENS_PER_EPOCH);
        assert_eq!(row.hours_40_epochs, 40.0 * row.hours_per_epoch);
    }
    assert!((epoch_time(3228.8, 16_752.7e6) - 1441.3).abs() < 0.05);
}

#[test]
fn ring_time_formula() {
    let gib = (1u64 << 30) as f64;
    assert!((ring_comm_time(gib, 2, 10e9) - 0.859).abs() < 5e-4);
    assert_eq!(ring_comm_time(gib, 1, 10e9), 0.0);
    let limit = 2.0 * gib * 8.0 / 10e9;
    let mut prev = 0.0;
    for n in 2..200 {
        let t = ring_comm_time(gib, n, 10e9);
        assert!(t > prev && t < limit);
        prev = t;
    }
    assert!(limit - prev < limit * 0.011);
}

#[test]
fn predicted_bytes_equal_transport_counters() {
    for n in [2usize, 3, 4, 8] {
        for len in [0usize, 1, 5, 64, 1001, 4099] {
            let ts = local_mesh(n, LinkDelay::default(), Duration::from_secs(10));
            let handles: Vec<_> = ts
                .into_iter()
                .map(|mut t| {
                    thread::spawn(move || {
                        let mut v = vec![1f32; len];
                        ring_allreduce(&mut t, &mut v, 1).unwrap();
                        (t.rank(), t.counters().sent)
                    })
                })
                .collect();
            for h in handles {
                let (rank, sent) = h.join().unwrap();
                assert_eq!(sent, ring_bytes_sent(len, 4, n, rank), "n={n} len={len} rank={rank}");
                if len % n == 0 {
                    assert_eq!(sent as f64, 2.0 * (n - 1) as f64 / n as f64 * (4 * len) as f64);
                }
            }
        }
    }
}

#[test]
fn iteration_time_limits() {
    let solo = iteration_time(
        &cluster(1, 1),
        &phase(1),
        &Knobs {
            overlap: 0.0,
            ..Knobs::default()
        },
    );
    assert_eq!(solo.total, solo.t_compute);
    assert_eq!(solo.t_compute, 4096.0 / 5429.1);

    // two single-device machines over 10 Gb/s, fp32 gradients of 340M parameters
    let two = iteration_time(&cluster(2, 1), &phase(1), &Knobs::default());
    assert!(two.t_comm >= two.t_compute, "{two:?}");

    // full hiding
    let fast = ClusterSpec {
        net_bps: 1e12,
        pcie_bps: 1e12,
        ..cluster(4, 8)
    };
    let t = iteration_time(
        &fast,
        &phase(2),
        &Knobs {
            overlap: 1.0,
            ..Knobs::default()
        },
    );
    assert!(t.t_comm <= t.t_bwd);
    assert_eq!(t.total, t.t_compute);

    let sum = iteration_time(
        &cluster(4, 8),
        &phase(1),
        &Knobs {
            comm: CommMode::Sum,
            ..Knobs::default()
        },
    );
    assert!((sum.t_comm - (sum.t_pcie + sum.t_net)).abs() < 1e-12);
}

#[test]
fn scaling_claims() {
    let k = Knobs::default();
    let one = scaling_point(&cluster(1, 1), &phase(1), &k);
    assert_eq!(one.efficiency, 1.0);

    let inter = scaling_point(&cluster(2, 1), &phase(1), &k);
    let intra = scaling_point(&cluster(1, 2), &phase(1), &k);
    assert!(inter.throughput / one.throughput <= 1.3);
    assert!(intra.efficiency > inter.efficiency);

    let big = scaling_point(&cluster(32, 8), &phase(4), &k);
    assert!((140.0..=190.0).contains(&big.factor), "{}", big.factor);

    // halving the exchanged bytes helps
    let f16 = ClusterSpec {
        grad_width: 2,
        ..cluster(32, 8)
    };
    assert!(scaling_point(&f16, &phase(4), &k).factor > big.factor);

    let mut prev = 0.0;
    for kk in 1..=8 {
        let e = scaling_point(&cluster(32, 8), &phase(kk), &k).efficiency;
        assert!(e > prev);
        prev = e;
    }
}

#[test]
fn grid_curve_is_bounded_and_monotone_in_machines() {
    let cfg = PerfConfig::default();
    let pts = weak_scaling_curve(&cfg.specs(), &cfg.knobs);
    assert_eq!(pts.len(), 24);
    assert_eq!(pts[0].label, "1M1G");
    assert_eq!(pts.last().unwrap().label, "32M8G");
    for p in &pts {
        assert!(p.efficiency > 0.0 && p.efficiency <= 1.0, "{p:?}");
    }
    for y in [1, 2, 4, 8] {
        let es: Vec<f64> = pts.iter().filter(|p| p.label.ends_with(&format!("M{y}G"))).map(|p| p.efficiency).collect();
        assert_eq!(es.len(), 6);
        assert!(es.windows(2).all(|w| w[1] <= w[0]), "{y}: {es:?}");
    }
    assert_eq!(standard_grid().len(), 24);
}

proptest! {
    #[test]
    fn efficiency_moves_the_right_way(
        x in 1usize..40,
        y in 1usize..9,
        k in 1usize..8,
        omega in 0.0f64..1.0,
        params in 1e6f64..1e9,
        net in 1e9f64..1e11,
    ) {
        let spec = ClusterSpec { machines: x, gpus_per_machine: y, params, net_bps: net, ..cluster(1, 1) };
        let knobs = Knobs { overlap: omega, ..Knobs::default() };
        let e = |s: &ClusterSpec, kk: usize, kn: &Knobs| scaling_point(s, &phase(kk), kn).efficiency;
        let base = e(&spec, k, &knobs);
        prop_assert!(base > 0.0 && base <= 1.0);
        let heavier = ClusterSpec { params: params * 2.0, ..spec };
        let faster = ClusterSpec { net_bps: net * 2.0, pcie_bps: spec.pcie_bps * 2.0, ..spec };
        let hidden = Knobs { overlap: (omega + 0.1).min(1.0), ..knobs };
        prop_assert!(e(&heavier, k, &knobs) <= base);
        prop_assert!(e(&faster, k, &knobs) >= base);
        prop_assert!(e(&spec, k + 1, &knobs) >= base);
        prop_assert!(e(&spec, k, &hidden) >= base);
    }
}

#[test]
fn cost_tables() {
    let cloud = CostSpec::Cloud {
        devices: 256,
        cents_per_hour: 35,
        hours: 288,
    };
    assert_eq!(cost_estimate(&cloud), Cents(2_580_480));
    assert_eq!(cost_estimate(&cloud).to_string(), "$25,804.80");
    let rows = standard_costs(Cents::from_dollars(19_500), 32);
    let totals: Vec<String> = rows.iter().map(|r| r.total.to_string()).collect();
    assert_eq!(totals, ["$25,804.80", "$624,000.00", "$4,768,000.00", "$12,768,000.00"]);
    assert_eq!(Cents(5).to_string(), "$0.05");
    assert_eq!(Cents(100_000).to_string(), "$1,000.00");
}

#[test]
fn config_overrides_defaults() {
    let cfg = PerfConfig::parse(
        "[cluster]\nnet_gbps = 25\nexchange = f16\n[phase]\naccumulation = 8\n[model]\noverlap = 0.25\ncomm = sum\n[sweep]\ntopologies = 1M1G, 4M8G\nnode_price = 20000.50\n",
    )
    .unwrap();
    assert_eq!(cfg.cluster.net_bps, 25e9);
    assert_eq!(cfg.cluster.grad_width, 2);
    assert_eq!(cfg.phase.accumulation, 8);
    assert_eq!(cfg.knobs.overlap, 0.25);
    assert_eq!(cfg.knobs.comm, CommMode::Sum);
    assert_eq!(cfg.topologies, vec![Topology::new(1, 1), Topology::new(4, 8)]);
    assert_eq!(cfg.node_price, Cents(2_000_050));
    assert_eq!(PerfConfig::parse("").unwrap(), PerfConfig::default());
    assert!(PerfConfig::parse("[cluster]\nwarp = 9\n").is_err());
    assert!(PerfConfig::parse("[model]\noverlap = 1.5\n").is_err());
    assert!(PerfConfig::parse("[phase]\naccumulation = 0\n").is_err());
    assert!(PerfConfig::parse("[sweep]\ntopologies = 3X\n").is_err());
}

const FWD: Duration = Duration::from_millis(20);
const BWD: Duration = Duration::from_millis(40);

/// Mean step wall time of rank 0 after one warm-up step.
fn measured_step(sizes: &[usize], n: usize, k: usize, threshold: usize, delay: LinkDelay) -> f64 {
    let reps: Vec<_> = (0..n).map(|r| SimulatedReplica::new(r, sizes, FWD, BWD)).collect();
    let cfg = EngineConfig {
        accumulation: k,
        bucket_bytes: threshold,
        ..EngineConfig::default()
    };
    let ts = local_mesh(n, delay, Duration::from_secs(10));
    let out = train_distributed(reps, ts, &cfg, 5, &EventLog::new()).unwrap();
    let walls: Vec<f64> = out[0].0.steps[1..].iter().map(|s| s.wall).collect();
    walls.iter().sum::<f64>() / walls.len() as f64
}

/// Predicted vs measured iteration time on the in-process transport with a
/// simulated link and sleeping replicas. As with real devices, the model is
/// fed the measured single-worker throughput.
#[test]
fn model_tracks_measured_iterations() {
    let sizes = vec![32_768usize; 8];
    let total_bytes: usize = sizes.iter().sum::<usize>() * 4;
    let bw = 160e6;
    let micro = measured_step(&sizes, 1, 1, usize::MAX, LinkDelay::default());
    let mut worst: f64 = 0.0;
    for n in [2usize, 3, 4] {
        for k in [1usize, 2] {
            for threshold in [usize::MAX, total_bytes / 4] {
                let plan = BucketPlan::new(&sizes, 4, threshold);
                let bucket_bytes: Vec<usize> = (0..plan.len()).map(|b| plan.numel(b) * 4).collect();
                let measured = measured_step(&sizes, n, k, threshold, LinkDelay::bandwidth(bw));

                let spec = ClusterSpec {
                    machines: 1,
                    gpus_per_machine: n,
                    throughput: 1.0 / micro,
                    pcie_bps: bw,
                    net_bps: bw,
                    params: sizes.iter().sum::<usize>() as f64,
                    grad_width: 4,
                };
                let ph = PhaseConfig {
                    seq_len: 1,
                    sentences: 1,
                    accumulation: k,
                    epochs: 1,
                    tokens_per_epoch: 1.0,
                };
                let knobs = Knobs {
                    overlap: overlap_from_buckets(&bucket_bytes),
                    bwd_share: BWD.as_secs_f64() / (FWD + BWD).as_secs_f64(),
                    comm: CommMode::Max,
                };
                let predicted = iteration_time(&spec, &ph, &knobs).total;
                let rel = (predicted - measured).abs() / measured;
                worst = worst.max(rel);
                eprintln!("n={n} k={k} buckets={}: predicted {predicted:.4} measured {measured:.4}", plan.len());
                assert!(rel <= 0.15, "n={n} k={k} buckets={}: off by {rel:.3}", plan.len());
            }
        }
    }
    eprintln!("worst relative error {worst:.3}");
}

#[test]
fn overlap_fraction_from_layout() {
    assert_eq!(overlap_from_buckets(&[100]), 0.0);
    assert_eq!(overlap_from_buckets(&[25, 25, 25, 25]), 0.75);
    assert_eq!(overlap_from_buckets(&[]), 0.0);
}
