use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::mpsc::{channel, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{ByteCounters, CommError, Transport};

/// Overrides the rendezvous given on the command line or in config.
pub const RENDEZVOUS_ENV: &str = "DESKBERT_RENDEZVOUS";

/// Rank addresses from a comma-separated `host:port` list or from a file
/// with one address per line.
pub fn parse_rendezvous(spec: &str) -> Result<Vec<SocketAddr>, CommError> {
    let text = if Path::new(spec).is_file() {
        std::fs::read_to_string(spec)?
    } else {
        spec.replace(',', "\n")
    };
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let addr = line
            .to_socket_addrs()
            .map_err(|e| CommError::Rendezvous(format!("{line}: {e}")))?
            .next()
            .ok_or_else(|| CommError::Rendezvous(format!("{line}: no address")))?;
        out.push(addr);
    }
    if out.is_empty() {
        return Err(CommError::Rendezvous("empty rendezvous".into()));
    }
    Ok(out)
}

/// The environment override if set, else `fallback`.
pub fn rendezvous_from_env(fallback: Option<&str>) -> Result<Option<Vec<SocketAddr>>, CommError> {
    match std::env::var(RENDEZVOUS_ENV).ok().as_deref().or(fallback) {
        Some(s) => parse_rendezvous(s).map(Some),
        None => Ok(None),
    }
}

struct Peer {
    writer: Option<Sender<Vec<u8>>>,
    thread: Option<JoinHandle<()>>,
    reader: BufReader<TcpStream>,
}

/// Full mesh of TCP streams. Frames are `u32 tag, u64 length, payload`, all
/// little-endian. Each peer has a writer thread so sends never block on a
/// slow receiver.
pub struct TcpTransport {
    rank: usize,
    peers: Vec<Option<Peer>>,
    timeout: Duration,
    counters: ByteCounters,
}

impl TcpTransport {
    pub fn connect(rank: usize, addrs: &[SocketAddr], timeout: Duration) -> Result<TcpTransport, CommError> {
        let addr = addrs.get(rank).ok_or(CommError::BadRank(rank))?;
        let listener = TcpListener::bind(addr)?;
        TcpTransport::from_listener(rank, listener, addrs, timeout)
    }

    /// Lower ranks dial higher ones; every stream opens with the dialer's rank.
    pub fn from_listener(
        rank: usize,
        listener: TcpListener,
        addrs: &[SocketAddr],
        timeout: Duration,
    ) -> Result<TcpTransport, CommError> {
        let world = addrs.len();
        if rank >= world {
            return Err(CommError::BadRank(rank));
        }
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        for (peer, addr) in addrs.iter().enumerate().skip(rank + 1) {
            let mut s = loop {
                match TcpStream::connect_timeout(addr, Duration::from_millis(200)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        let _ = e;
                        thread::sleep(Duration::from_millis(20));
                    }
                    Err(e) => return Err(CommError::Rendezvous(format!("rank {peer} at {addr}: {e}"))),
                }
            };
            s.write_all(&(rank as u32).to_le_bytes())?;
            streams[peer] = Some(s);
        }
        listener.set_nonblocking(true)?;
        let mut pending = rank;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_read_timeout(Some(timeout))?;
                    let mut id = [0u8; 4];
                    s.read_exact(&mut id)?;
                    let peer = u32::from_le_bytes(id) as usize;
                    if peer >= rank || streams[peer].is_some() {
                        return Err(CommError::Rendezvous(format!("unexpected handshake from rank {peer}")));
                    }
                    streams[peer] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock && Instant::now() < deadline => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    return Err(CommError::Rendezvous(format!("{pending} peers never connected")));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let mut peers = Vec::with_capacity(world);
        for s in streams {
            let Some(s) = s else {
                peers.push(None);
                continue;
            };
            s.set_nodelay(true)?;
            s.set_read_timeout(Some(timeout))?;
            let (tx, rx) = channel::<Vec<u8>>();
            let mut w = BufWriter::new(s.try_clone()?);
            let thread = thread::spawn(move || {
                for frame in rx {
                    if w.write_all(&frame).and_then(|_| w.flush()).is_err() {
                        break;
                    }
                }
            });
            peers.push(Some(Peer {
                writer: Some(tx),
                thread: Some(thread),
                reader: BufReader::new(s),
            }));
        }
        Ok(TcpTransport {
            rank,
            peers,
            timeout,
            counters: ByteCounters::default(),
        })
    }

    fn peer(&mut self, r: usize) -> Result<&mut Peer, CommError> {
        self.peers.get_mut(r).and_then(Option::as_mut).ok_or(CommError::BadRank(r))
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.peers.len()
    }

    fn send(&mut self, to: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError> {
        let n = payload.len();
        let mut frame = Vec::with_capacity(12 + n);
        frame.extend_from_slice(&tag.to_le_bytes());
        frame.extend_from_slice(&(n as u64).to_le_bytes());
        frame.extend_from_slice(&payload);
        let writer = self.peer(to)?.writer.as_ref().expect("writer lives until drop");
        writer.send(frame).map_err(|_| CommError::PeerDisconnected(to))?;
        self.counters.sent += n as u64;
        Ok(())
    }

    fn recv(&mut self, from: usize, tag: u32) -> Result<Vec<u8>, CommError> {
        let timeout = self.timeout;
        let map = |e: io::Error| match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => CommError::Timeout { from, timeout },
            ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => {
                CommError::PeerDisconnected(from)
            }
            _ => CommError::Io(e),
        };
        let reader = &mut self.peer(from)?.reader;
        let mut head = [0u8; 12];
        reader.read_exact(&mut head).map_err(map)?;
        let got = u32::from_le_bytes(head[..4].try_into().expect("4 bytes"));
        let len = u64::from_le_bytes(head[4..].try_into().expect("8 bytes")) as usize;
        let mut payload = vec![0u8; len];
        reader.read_exact(&mut payload).map_err(map)?;
        if got != tag {
            return Err(CommError::TagMismatch {
                from,
                expected: tag,
                got,
            });
        }
        self.counters.received += len as u64;
        Ok(payload)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for p in self.peers.iter_mut().flatten() {
            p.writer.take();
            if let Some(t) = p.thread.take() {
                let _ = t.join();
            }
        }
    }
}
