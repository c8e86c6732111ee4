use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use super::CommError;

/// Payload bytes moved through a transport, excluding framing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteCounters {
    pub sent: u64,
    pub received: u64,
}

/// Point-to-point tagged messaging between the ranks of one group.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world(&self) -> usize;
    fn send(&mut self, to: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError>;
    /// Next message from `from`; it must carry `tag`.
    fn recv(&mut self, from: usize, tag: u32) -> Result<Vec<u8>, CommError>;
    fn counters(&self) -> ByteCounters;
}

/// Simulated link cost charged to the sender of every message.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkDelay {
    pub latency: Duration,
    pub per_byte: Duration,
}

impl LinkDelay {
    /// Delay equivalent to a link of `bits_per_sec`.
    pub fn bandwidth(bits_per_sec: f64) -> LinkDelay {
        LinkDelay {
            latency: Duration::ZERO,
            per_byte: Duration::from_secs_f64(8.0 / bits_per_sec),
        }
    }

    pub fn cost(&self, bytes: usize) -> Duration {
        self.latency + self.per_byte.mul_f64(bytes as f64)
    }

    pub fn is_zero(&self) -> bool {
        self.latency.is_zero() && self.per_byte.is_zero()
    }
}

type Msg = (u32, Vec<u8>);

/// In-process transport over channels, one per ordered rank pair.
pub struct LocalTransport {
    rank: usize,
    tx: Vec<Option<Sender<Msg>>>,
    rx: Vec<Option<Receiver<Msg>>>,
    delay: LinkDelay,
    timeout: Duration,
    counters: ByteCounters,
}

/// Fully connected in-process group of `world` transports.
pub fn local_mesh(world: usize, delay: LinkDelay, timeout: Duration) -> Vec<LocalTransport> {
    let mut tx: Vec<Vec<Option<Sender<Msg>>>> = (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
    let mut rx: Vec<Vec<Option<Receiver<Msg>>>> = (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
    for from in 0..world {
        for to in 0..world {
            if from != to {
                let (s, r) = channel();
                tx[from][to] = Some(s);
                rx[to][from] = Some(r);
            }
        }
    }
    tx.into_iter()
        .zip(rx)
        .enumerate()
        .map(|(rank, (tx, rx))| LocalTransport {
            rank,
            tx,
            rx,
            delay,
            timeout,
            counters: ByteCounters::default(),
        })
        .collect()
}

impl Transport for LocalTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.tx.len()
    }

    fn send(&mut self, to: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError> {
        let tx = self.tx.get(to).and_then(Option::as_ref).ok_or(CommError::BadRank(to))?;
        if !self.delay.is_zero() {
            thread::sleep(self.delay.cost(payload.len()));
        }
        let n = payload.len() as u64;
        tx.send((tag, payload)).map_err(|_| CommError::PeerDisconnected(to))?;
        self.counters.sent += n;
        Ok(())
    }

    fn recv(&mut self, from: usize, tag: u32) -> Result<Vec<u8>, CommError> {
        let rx = self.rx.get(from).and_then(Option::as_ref).ok_or(CommError::BadRank(from))?;
        let (got, payload) = rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => CommError::Timeout {
                from,
                timeout: self.timeout,
            },
            RecvTimeoutError::Disconnected => CommError::PeerDisconnected(from),
        })?;
        if got != tag {
            return Err(CommError::TagMismatch {
                from,
                expected: tag,
                got,
            });
        }
        self.counters.received += payload.len() as u64;
        Ok(payload)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn rank(&self) -> usize {
        (**self).rank()
    }

    fn world(&self) -> usize {
        (**self).world()
    }

    fn send(&mut self, to: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError> {
        (**self).send(to, tag, payload)
    }

    fn recv(&mut self, from: usize, tag: u32) -> Result<Vec<u8>, CommError> {
        (**self).recv(from, tag)
    }

    fn counters(&self) -> ByteCounters {
        (**self).counters()
    }
}
