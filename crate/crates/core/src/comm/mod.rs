//! Data-parallel execution: transports, ring all-reduce, gradient buckets
//! and the accumulate-then-synchronise training loop.

mod bucket;
mod engine;
mod events;
mod replica;
mod ring;
mod tcp;
mod topology;
mod transport;

use std::time::Duration;

use thiserror::Error;

pub use bucket::{BucketPlan, BucketState, DEFAULT_BUCKET_BYTES};
pub use engine::{train_distributed, EngineConfig, Exchange, RankReport, StepReport, Worker};
pub use events::{Event, EventKind, EventLog};
pub use replica::{BertReplica, DataSource, GradSink, Replica, SimulatedReplica};
pub use ring::{allgather_u64, allreduce_f32, chunk_range, ring_allreduce, Element};
pub use tcp::{parse_rendezvous, rendezvous_from_env, TcpTransport, RENDEZVOUS_ENV};
pub use topology::Topology;
pub use transport::{local_mesh, ByteCounters, LinkDelay, LocalTransport, Transport};

use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum CommError {
    #[error("rank {0} disconnected")]
    PeerDisconnected(usize),
    #[error("expected {expected} bytes from rank {from}, got {got}")]
    LengthMismatch { from: usize, expected: usize, got: usize },
    #[error("expected message tag {expected} from rank {from}, got {got}")]
    TagMismatch { from: usize, expected: u32, got: u32 },
    #[error("no message from rank {from} within {timeout:?}")]
    Timeout { from: usize, timeout: Duration },
    #[error("rank {0} is outside the group")]
    BadRank(usize),
    #[error("rendezvous: {0}")]
    Rendezvous(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("bucket layouts differ across ranks: {0:x?}")]
    BucketLayoutMismatch(Vec<u64>),
    #[error("replicas diverged after step {step}: {hashes:x?}")]
    ReplicaDivergence { step: usize, hashes: Vec<u64> },
    #[error("worker {0} panicked")]
    WorkerPanic(usize),
    #[error("{0}")]
    Invalid(String),
}

impl TrainError {
    /// Errors that are consequences of another rank failing first.
    pub fn is_secondary(&self) -> bool {
        matches!(
            self,
            TrainError::Comm(CommError::PeerDisconnected(_) | CommError::Timeout { .. })
        )
    }
}
