use std::ops::Range;

use super::engine::Exchange;
use super::{CommError, Transport};
use crate::half::{f16_to_f32, f32_to_f16, Binary16};

/// A value that can be summed across ranks and sent as little-endian bytes.
pub trait Element: Copy + Send + 'static {
    const WIDTH: usize;
    /// `acc` is the partial sum arriving from upstream.
    fn combine(acc: Self, local: Self) -> Self;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

macro_rules! float_element {
    ($t:ty) => {
        impl Element for $t {
            const WIDTH: usize = std::mem::size_of::<$t>();
            fn combine(acc: Self, local: Self) -> Self {
                acc + local
            }
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

macro_rules! int_element {
    ($t:ty) => {
        impl Element for $t {
            const WIDTH: usize = std::mem::size_of::<$t>();
            fn combine(acc: Self, local: Self) -> Self {
                acc.wrapping_add(local)
            }
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

float_element!(f32);
float_element!(f64);
int_element!(i32);
int_element!(i64);
int_element!(u32);
int_element!(u64);

impl Element for Binary16 {
    const WIDTH: usize = 2;
    fn combine(acc: Self, local: Self) -> Self {
        f32_to_f16(f16_to_f32(acc) + f16_to_f32(local))
    }
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        Binary16::from_bits(u16::from_le_bytes([bytes[0], bytes[1]]))
    }
}

/// Chunk `c` of `n` over `len` elements; chunk sizes differ by at most one.
pub fn chunk_range(len: usize, n: usize, c: usize) -> Range<usize> {
    c * len / n..(c + 1) * len / n
}

fn encode<T: Element>(xs: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(xs.len() * T::WIDTH);
    for &x in xs {
        x.put(&mut out);
    }
    out
}

fn receive<T: Element>(
    t: &mut (impl Transport + ?Sized),
    from: usize,
    tag: u32,
    want: usize,
) -> Result<Vec<u8>, CommError> {
    let bytes = t.recv(from, tag)?;
    if bytes.len() != want * T::WIDTH {
        return Err(CommError::LengthMismatch {
            from,
            expected: want * T::WIDTH,
            got: bytes.len(),
        });
    }
    Ok(bytes)
}

/// In-place sum over all ranks: reduce-scatter then all-gather around the
/// ring, `N - 1` steps each. Chunk `c` is accumulated starting at rank `c`
/// and walking forward, so every rank ends with the same bits.
pub fn ring_allreduce<T: Element>(
    t: &mut (impl Transport + ?Sized),
    data: &mut [T],
    tag: u32,
) -> Result<(), CommError> {
    let (r, n) = (t.rank(), t.world());
    if n == 1 {
        return Ok(());
    }
    let next = (r + 1) % n;
    let prev = (r + n - 1) % n;
    let len = data.len();
    for s in 0..n - 1 {
        let send_c = (r + n - s) % n;
        let recv_c = (r + 2 * n - s - 1) % n;
        t.send(next, tag, encode(&data[chunk_range(len, n, send_c)]))?;
        let range = chunk_range(len, n, recv_c);
        let bytes = receive::<T>(t, prev, tag, range.len())?;
        for (x, b) in data[range].iter_mut().zip(bytes.chunks_exact(T::WIDTH)) {
            *x = T::combine(T::get(b), *x);
        }
    }
    for s in 0..n - 1 {
        let send_c = (r + 1 + n - s) % n;
        let recv_c = (r + n - s) % n;
        t.send(next, tag, encode(&data[chunk_range(len, n, send_c)]))?;
        let range = chunk_range(len, n, recv_c);
        let bytes = receive::<T>(t, prev, tag, range.len())?;
        for (x, b) in data[range].iter_mut().zip(bytes.chunks_exact(T::WIDTH)) {
            *x = T::get(b);
        }
    }
    Ok(())
}

/// Sum f32 gradients, optionally exchanging them as binary16 on the wire.
pub fn allreduce_f32(
    t: &mut (impl Transport + ?Sized),
    data: &mut [f32],
    tag: u32,
    exchange: Exchange,
) -> Result<(), CommError> {
    match exchange {
        Exchange::F32 => ring_allreduce(t, data, tag),
        Exchange::F16 => {
            let mut h: Vec<Binary16> = data.iter().map(|&v| f32_to_f16(v)).collect();
            ring_allreduce(t, &mut h, tag)?;
            for (d, v) in data.iter_mut().zip(h) {
                *d = f16_to_f32(v);
            }
            Ok(())
        }
    }
}

/// Every rank's `value`, indexed by rank.
pub fn allgather_u64(t: &mut (impl Transport + ?Sized), value: u64, tag: u32) -> Result<Vec<u64>, CommError> {
    let mut slots = vec![0u64; t.world()];
    slots[t.rank()] = value;
    ring_allreduce(t, &mut slots, tag)?;
    Ok(slots)
}
