use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::ring::{allgather_u64, allreduce_f32};
use super::{
    BucketPlan, BucketState, CommError, EventKind, EventLog, GradSink, Replica, TrainError, Transport,
    DEFAULT_BUCKET_BYTES,
};

/// Wire dtype for gradient exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exchange {
    #[default]
    F32,
    F16,
}

impl Exchange {
    pub fn width(self) -> usize {
        match self {
            Exchange::F32 => 4,
            Exchange::F16 => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Micro-steps per optimizer step (K).
    pub accumulation: usize,
    pub bucket_bytes: usize,
    /// Launch each bucket's all-reduce during backward as soon as it fills.
    pub overlap: bool,
    pub exchange: Exchange,
    pub loss_scale: f32,
    /// Watchdog for every blocking wait.
    pub timeout: Duration,
    /// Compare parameter hashes across ranks after every step.
    pub check_consistency: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            accumulation: 1,
            bucket_bytes: DEFAULT_BUCKET_BYTES,
            overlap: true,
            exchange: Exchange::F32,
            loss_scale: 1.0,
            timeout: Duration::from_secs(60),
            check_consistency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    /// Mean of this rank's micro-batch losses.
    pub loss: f32,
    /// Seconds from the first micro-step to the end of synchronisation.
    pub wall: f64,
    /// Parameter hash of every rank when checked, else of this rank only.
    pub hashes: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RankReport {
    pub rank: usize,
    pub steps: Vec<StepReport>,
}

impl RankReport {
    pub fn losses(&self) -> Vec<f32> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

enum Job {
    Reduce { bucket: usize, step: usize, data: Vec<f32> },
    Gather { value: u64 },
}

enum Done {
    Reduced { bucket: usize, data: Vec<f32> },
    Gathered(Vec<u64>),
}

/// The communication context: a thread that owns the transport and runs
/// collectives in the order they are submitted.
struct Comm {
    rank: usize,
    jobs: Option<Sender<Job>>,
    done: Receiver<Result<Done, CommError>>,
    thread: Option<JoinHandle<()>>,
    timeout: Duration,
}

impl Comm {
    fn spawn(mut t: Box<dyn Transport>, exchange: Exchange, log: EventLog, timeout: Duration) -> Comm {
        let rank = t.rank();
        let (jobs, rx) = channel::<Job>();
        let (tx, done) = channel();
        let thread = thread::spawn(move || {
            let mut tag = 0u32;
            for job in rx {
                tag = tag.wrapping_add(1);
                let r = match job {
                    Job::Reduce { bucket, step, mut data } => {
                        let bytes = (data.len() * exchange.width()) as u64;
                        log.record(rank, EventKind::CommStart, bytes, step, Some(bucket));
                        let before = t.counters().sent;
                        let r = allreduce_f32(&mut t, &mut data, tag, exchange);
                        let sent = t.counters().sent - before;
                        log.record(rank, EventKind::CommEnd, sent, step, Some(bucket));
                        r.map(|_| Done::Reduced { bucket, data })
                    }
                    Job::Gather { value } => allgather_u64(&mut t, value, tag).map(Done::Gathered),
                };
                let failed = r.is_err();
                if tx.send(r).is_err() || failed {
                    break;
                }
            }
        });
        Comm {
            rank,
            jobs: Some(jobs),
            done,
            thread: Some(thread),
            timeout,
        }
    }

    fn submit(&self, job: Job) -> Result<(), CommError> {
        let jobs = self.jobs.as_ref().expect("open until drop");
        jobs.send(job).map_err(|_| CommError::PeerDisconnected(self.rank))
    }

    fn wait(&self) -> Result<Done, CommError> {
        match self.done.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => Err(CommError::Timeout {
                from: self.rank,
                timeout: self.timeout,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::PeerDisconnected(self.rank)),
        }
    }

    fn gather(&self, value: u64) -> Result<Vec<u64>, CommError> {
        self.submit(Job::Gather { value })?;
        match self.wait()? {
            Done::Gathered(v) => Ok(v),
            Done::Reduced { .. } => unreachable!("jobs complete in submission order"),
        }
    }
}

impl Drop for Comm {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Per-bucket bookkeeping shared by the backward hook and the step.
struct Buckets<'a> {
    rank: usize,
    step: usize,
    plan: &'a BucketPlan,
    acc: &'a mut [Vec<f32>],
    pending: &'a mut [usize],
    state: &'a mut [BucketState],
    comm: &'a Comm,
    log: &'a EventLog,
    scale: f32,
    width: usize,
}

impl Buckets<'_> {
    fn launch(&mut self, b: usize) -> Result<(), CommError> {
        let mut data = Vec::with_capacity(self.plan.numel(b));
        for &p in self.plan.params(b) {
            data.extend(self.acc[p].iter().map(|g| g * self.scale));
        }
        self.state[b] = BucketState::InFlight;
        let bytes = (data.len() * self.width) as u64;
        self.log.record(self.rank, EventKind::BucketReady, bytes, self.step, Some(b));
        self.comm.submit(Job::Reduce {
            bucket: b,
            step: self.step,
            data,
        })
    }
}

struct Hook<'a> {
    buckets: Buckets<'a>,
    first: bool,
    launch: bool,
    error: Option<CommError>,
}

impl GradSink for Hook<'_> {
    fn backward_started(&mut self) {
        let b = &self.buckets;
        b.log.record(b.rank, EventKind::BwdStart, 0, b.step, None);
    }

    fn grad_ready(&mut self, param: usize, grad: &[f32]) {
        let acc = &mut self.buckets.acc[param];
        if self.first {
            acc.clear();
            acc.extend_from_slice(grad);
        } else {
            for (a, g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
        }
        if !self.launch {
            return;
        }
        let b = self.buckets.plan.bucket_of(param);
        self.buckets.pending[b] -= 1;
        if self.buckets.pending[b] == 0 && self.error.is_none() {
            if let Err(e) = self.buckets.launch(b) {
                self.error = Some(e);
            }
        }
    }
}

/// One rank of a data-parallel group.
pub struct Worker<R: Replica> {
    rank: usize,
    world: usize,
    replica: R,
    cfg: EngineConfig,
    plan: BucketPlan,
    comm: Comm,
    log: EventLog,
    acc: Vec<Vec<f32>>,
    pending: Vec<usize>,
    state: Vec<BucketState>,
    micro: usize,
    step: usize,
    loss_sum: f64,
    started: Instant,
}

impl<R: Replica> Worker<R> {
    /// Builds the bucket plan and checks it matches on every rank.
    pub fn new(replica: R, transport: Box<dyn Transport>, cfg: EngineConfig, log: EventLog) -> Result<Self, TrainError> {
        if cfg.accumulation == 0 {
            return Err(TrainError::Invalid("accumulation steps must be at least 1".into()));
        }
        if !(cfg.loss_scale.is_finite() && cfg.loss_scale > 0.0) {
            return Err(TrainError::Invalid(format!("bad loss scale {}", cfg.loss_scale)));
        }
        let (rank, world) = (transport.rank(), transport.world());
        let sizes = replica.param_sizes();
        let plan = BucketPlan::new(&sizes, cfg.exchange.width(), cfg.bucket_bytes);
        let comm = Comm::spawn(transport, cfg.exchange, log.clone(), cfg.timeout);
        let layouts = comm.gather(plan.layout_hash())?;
        if layouts.iter().any(|&h| h != layouts[0]) {
            return Err(TrainError::BucketLayoutMismatch(layouts));
        }
        Ok(Worker {
            rank,
            world,
            replica,
            pending: vec![0; plan.len()],
            state: vec![BucketState::Reduced; plan.len()],
            acc: sizes.iter().map(|&n| Vec::with_capacity(n)).collect(),
            plan,
            cfg,
            comm,
            log,
            micro: 0,
            step: 0,
            loss_sum: 0.0,
            started: Instant::now(),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn plan(&self) -> &BucketPlan {
        &self.plan
    }

    pub fn replica(&self) -> &R {
        &self.replica
    }

    pub fn into_replica(self) -> R {
        self.replica
    }

    /// Position within the current accumulation window, in `[0, K)`.
    pub fn micro_index(&self) -> usize {
        self.micro
    }

    /// One forward/backward. Every K-th call also synchronises and steps
    /// the optimizer, returning the step's report.
    pub fn micro_step(&mut self) -> Result<Option<StepReport>, TrainError> {
        let k = self.cfg.accumulation;
        if self.micro == 0 {
            self.started = Instant::now();
            self.loss_sum = 0.0;
            for b in 0..self.plan.len() {
                self.pending[b] = self.plan.params(b).len();
                self.state[b] = BucketState::Filling;
            }
        }
        let last = self.micro + 1 == k;
        let mut hook = Hook {
            buckets: Buckets {
                rank: self.rank,
                step: self.step,
                plan: &self.plan,
                acc: &mut self.acc,
                pending: &mut self.pending,
                state: &mut self.state,
                comm: &self.comm,
                log: &self.log,
                scale: 1.0 / k as f32,
                width: self.cfg.exchange.width(),
            },
            first: self.micro == 0,
            launch: last && self.cfg.overlap,
            error: None,
        };
        let loss = self.replica.micro_step(self.step, self.micro, self.cfg.loss_scale, &mut hook)?;
        if let Some(e) = hook.error.take() {
            return Err(e.into());
        }
        self.log.record(self.rank, EventKind::BwdEnd, 0, self.step, None);
        self.loss_sum += loss as f64;
        self.micro += 1;
        if !last {
            return Ok(None);
        }
        self.micro = 0;

        for b in 0..self.plan.len() {
            if hook.buckets.state[b] == BucketState::Filling {
                hook.buckets.launch(b)?;
            }
        }
        let inv = 1.0 / (self.world as f32 * self.cfg.loss_scale);
        let mut grads: Vec<Vec<f32>> = vec![Vec::new(); self.acc.len()];
        for _ in 0..self.plan.len() {
            let Done::Reduced { bucket, data } = self.comm.wait()? else {
                unreachable!("only reductions are in flight");
            };
            let mut off = 0;
            for &p in self.plan.params(bucket) {
                let n = self.acc[p].len();
                grads[p] = data[off..off + n].iter().map(|g| g * inv).collect();
                off += n;
            }
            self.state[bucket] = BucketState::Reduced;
        }
        self.replica.apply(&grads)?;
        self.log.record(self.rank, EventKind::StepEnd, 0, self.step, None);

        let own = self.replica.param_hash();
        let hashes = if self.cfg.check_consistency && self.world > 1 {
            let hs = self.comm.gather(own)?;
            if hs.iter().any(|&h| h != hs[0]) {
                return Err(TrainError::ReplicaDivergence {
                    step: self.step,
                    hashes: hs,
                });
            }
            hs
        } else {
            vec![own]
        };
        let report = StepReport {
            step: self.step,
            loss: (self.loss_sum / k as f64) as f32,
            wall: self.started.elapsed().as_secs_f64(),
            hashes,
        };
        self.step += 1;
        Ok(Some(report))
    }

    /// Run `steps` optimizer steps.
    pub fn run(&mut self, steps: usize) -> Result<RankReport, TrainError> {
        let mut report = RankReport {
            rank: self.rank,
            steps: Vec::with_capacity(steps),
        };
        while report.steps.len() < steps {
            if let Some(s) = self.micro_step()? {
                report.steps.push(s);
            }
        }
        Ok(report)
    }
}

/// Train one replica per transport on its own thread. If any rank fails,
/// the first error that is not merely a consequence of another rank's
/// failure is returned.
pub fn train_distributed<R: Replica, T: Transport + 'static>(
    replicas: Vec<R>,
    transports: Vec<T>,
    cfg: &EngineConfig,
    steps: usize,
    log: &EventLog,
) -> Result<Vec<(RankReport, R)>, TrainError> {
    if replicas.len() != transports.len() {
        return Err(TrainError::Invalid(format!(
            "{} replicas for {} transports",
            replicas.len(),
            transports.len()
        )));
    }
    let results: Vec<Result<(RankReport, R), TrainError>> = thread::scope(|s| {
        let handles: Vec<_> = replicas
            .into_iter()
            .zip(transports)
            .map(|(r, t)| {
                let (cfg, log) = (cfg.clone(), log.clone());
                s.spawn(move || {
                    let mut w = Worker::new(r, Box::new(t), cfg, log)?;
                    let report = w.run(steps)?;
                    Ok((report, w.into_replica()))
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| h.join().unwrap_or(Err(TrainError::WorkerPanic(rank))))
            .collect()
    });
    let mut first: Option<TrainError> = None;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => match &first {
                Some(f) if !f.is_secondary() || e.is_secondary() => {}
                _ => first = Some(e),
            },
        }
    }
    match first {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
