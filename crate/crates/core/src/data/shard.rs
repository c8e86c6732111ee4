use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::examples::TrainingExample;
use super::DataError;

pub const MAGIC: [u8; 4] = *b"BSHD";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub seq_len: u32,
    pub max_pred: u32,
    pub count: u64,
    pub seed: u64,
}

impl ShardHeader {
    pub fn record_bytes(&self) -> usize {
        record_bytes(self.seq_len as usize, self.max_pred as usize)
    }

    fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut h = [0u8; HEADER_BYTES];
        h[0..4].copy_from_slice(&MAGIC);
        h[4..8].copy_from_slice(&VERSION.to_le_bytes());
        h[8..12].copy_from_slice(&self.seq_len.to_le_bytes());
        h[12..16].copy_from_slice(&self.max_pred.to_le_bytes());
        h[16..24].copy_from_slice(&self.count.to_le_bytes());
        h[24..32].copy_from_slice(&self.seed.to_le_bytes());
        h
    }

    fn decode(h: &[u8; HEADER_BYTES]) -> Result<ShardHeader, DataError> {
        if h[0..4] != MAGIC {
            return Err(DataError::CorruptShard("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(h[i..i + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(DataError::CorruptShard(format!("unsupported version {version}")));
        }
        Ok(ShardHeader {
            seq_len: u32_at(8),
            max_pred: u32_at(12),
            count: u64_at(16),
            seed: u64_at(24),
        })
    }
}

/// Size of one fixed-width record.
pub fn record_bytes(seq_len: usize, max_pred: usize) -> usize {
    4 * seq_len + seq_len + 4 + 8 * max_pred + 1
}

/// Append the fixed-width encoding of `e` to `out`.
pub fn encode_record(e: &TrainingExample, max_pred: usize, out: &mut Vec<u8>) -> Result<(), DataError> {
    if e.mask_positions.len() > max_pred || e.segments.len() != e.ids.len() {
        return Err(DataError::Invalid(format!(
            "example with {} predictions does not fit max_pred {max_pred}",
            e.mask_positions.len()
        )));
    }
    for &id in &e.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out.extend_from_slice(&e.segments);
    out.extend_from_slice(&(e.mask_positions.len() as u32).to_le_bytes());
    for i in 0..max_pred {
        let p = e.mask_positions.get(i).copied().unwrap_or(0);
        out.extend_from_slice(&p.to_le_bytes());
    }
    for i in 0..max_pred {
        let l = e.mask_labels.get(i).copied().unwrap_or(0);
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.push(e.is_next as u8);
    Ok(())
}

pub fn decode_record(buf: &[u8], seq_len: usize, max_pred: usize) -> Result<TrainingExample, DataError> {
    if buf.len() != record_bytes(seq_len, max_pred) {
        return Err(DataError::CorruptShard("short record".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    let ids: Vec<u32> = (0..seq_len).map(|i| u32_at(4 * i)).collect();
    let mut off = 4 * seq_len;
    let segments = buf[off..off + seq_len].to_vec();
    off += seq_len;
    let k = u32_at(off) as usize;
    off += 4;
    if k > max_pred {
        return Err(DataError::CorruptShard(format!("mask count {k} exceeds {max_pred}")));
    }
    let mask_positions = (0..k).map(|i| u32_at(off + 4 * i)).collect();
    off += 4 * max_pred;
    let mask_labels = (0..k).map(|i| u32_at(off + 4 * i)).collect();
    off += 4 * max_pred;
    let is_next = match buf[off] {
        0 => false,
        1 => true,
        b => return Err(DataError::CorruptShard(format!("is_next byte {b}"))),
    };
    Ok(TrainingExample {
        ids,
        segments,
        mask_positions,
        mask_labels,
        is_next,
    })
}

/// Serialise a complete shard (header plus records) into memory.
pub fn encode_shard(
    examples: &[&TrainingExample],
    seq_len: usize,
    max_pred: usize,
    seed: u64,
) -> Result<Vec<u8>, DataError> {
    let header = ShardHeader {
        seq_len: seq_len as u32,
        max_pred: max_pred as u32,
        count: examples.len() as u64,
        seed,
    };
    let mut out = Vec::with_capacity(HEADER_BYTES + examples.len() * header.record_bytes());
    out.extend_from_slice(&header.encode());
    for e in examples {
        if e.seq_len() != seq_len {
            return Err(DataError::Invalid("sequence length differs from shard".into()));
        }
        encode_record(e, max_pred, &mut out)?;
    }
    Ok(out)
}

pub fn shard_file_name(index: usize, n: usize) -> String {
    format!("shard-{index:05}-of-{n:05}.bshd")
}

/// Seeded shuffle, then round-robin assignment to `n_shards` files.
pub fn shard_dataset(
    examples: &[TrainingExample],
    n_shards: usize,
    max_pred: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, DataError> {
    if n_shards == 0 {
        return Err(DataError::Invalid("need at least one shard".into()));
    }
    let seq_len = examples.first().map_or(0, |e| e.seq_len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(n_shards);
    for s in 0..n_shards {
        let mine: Vec<&TrainingExample> = order
            .iter()
            .skip(s)
            .step_by(n_shards)
            .map(|&i| &examples[i])
            .collect();
        let bytes = encode_shard(&mine, seq_len, max_pred, seed)?;
        let path = out_dir.join(shard_file_name(s, n_shards));
        let mut w = BufWriter::new(File::create(&path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Keyed bijection on `0..n` in constant memory: a balanced Feistel network
/// over the next even power of two, cycle-walked back into range.
#[derive(Debug, Clone)]
pub struct FeistelPermutation {
    n: u64,
    half_bits: u32,
    keys: [u64; 4],
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl FeistelPermutation {
    pub fn new(n: u64, seed: u64) -> FeistelPermutation {
        let bits = 64 - n.saturating_sub(1).leading_zeros();
        let half_bits = bits.div_ceil(2).max(1);
        let mut keys = [0u64; 4];
        let mut s = seed;
        for k in &mut keys {
            s = splitmix(s);
            *k = s;
        }
        FeistelPermutation { n, half_bits, keys }
    }

    fn round(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let (mut l, mut r) = (x >> self.half_bits, x & mask);
        for k in self.keys {
            let f = splitmix(r ^ k) & mask;
            (l, r) = (r, l ^ f);
        }
        (l << self.half_bits) | r
    }

    pub fn apply(&self, i: u64) -> u64 {
        assert!(i < self.n, "index {i} outside 0..{}", self.n);
        let mut x = self.round(i);
        while x >= self.n {
            x = self.round(x);
        }
        x
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Streams one shard file record by record.
pub struct ShardReader {
    file: File,
    header: ShardHeader,
    bytes_read: u64,
    buf: Vec<u8>,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<ShardReader, DataError> {
        let mut file = File::open(path)?;
        let mut h = [0u8; HEADER_BYTES];
        file.read_exact(&mut h)
            .map_err(|_| DataError::CorruptShard("truncated header".into()))?;
        let header = ShardHeader::decode(&h)?;
        let expect = HEADER_BYTES as u64 + header.count * header.record_bytes() as u64;
        let actual = file.metadata()?.len();
        if actual != expect {
            return Err(DataError::CorruptShard(format!(
                "{} examples need {expect} bytes, file has {actual}",
                header.count
            )));
        }
        Ok(ShardReader {
            file,
            buf: vec![0; header.record_bytes()],
            header,
            bytes_read: HEADER_BYTES as u64,
        })
    }

    pub fn header(&self) -> ShardHeader {
        self.header
    }

    pub fn len(&self) -> usize {
        self.header.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    /// Total bytes pulled from the file so far, header included.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }

    pub fn read(&mut self, index: usize) -> Result<TrainingExample, DataError> {
        if index >= self.len() {
            return Err(DataError::Invalid(format!("record {index} of {}", self.len())));
        }
        let rb = self.header.record_bytes() as u64;
        self.file
            .seek(SeekFrom::Start(HEADER_BYTES as u64 + index as u64 * rb))?;
        self.file.read_exact(&mut self.buf)?;
        self.bytes_read += rb;
        decode_record(&self.buf, self.header.seq_len as usize, self.header.max_pred as usize)
    }

    /// All records in file order.
    pub fn read_all(&mut self) -> Result<Vec<TrainingExample>, DataError> {
        (0..self.len()).map(|i| self.read(i)).collect()
    }

    /// One epoch in the order fixed by `epoch_seed`, `batch_size` examples at
    /// a time (the last batch may be short).
    pub fn epoch(&mut self, epoch_seed: u64, batch_size: usize) -> EpochIter<'_> {
        let perm = FeistelPermutation::new(self.header.count, epoch_seed ^ self.header.seed);
        EpochIter {
            reader: self,
            perm,
            next: 0,
            batch_size: batch_size.max(1),
        }
    }
}

pub struct EpochIter<'a> {
    reader: &'a mut ShardReader,
    perm: FeistelPermutation,
    next: u64,
    batch_size: usize,
}

impl Iterator for EpochIter<'_> {
    type Item = Result<Vec<TrainingExample>, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.perm.len() {
            return None;
        }
        let end = (self.next + self.batch_size as u64).min(self.perm.len());
        let batch = (self.next..end)
            .map(|i| self.reader.read(self.perm.apply(i) as usize))
            .collect();
        self.next = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feistel_is_a_permutation() {
        for n in [1u64, 2, 3, 7, 100, 1000, 4097] {
            let p = FeistelPermutation::new(n, 42);
            let mut seen = vec![false; n as usize];
            for i in 0..n {
                let j = p.apply(i) as usize;
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn record_round_trip() {
        let e = TrainingExample {
            ids: vec![1, 3, 9, 2, 0],
            segments: vec![0, 0, 0, 0, 0],
            mask_positions: vec![1],
            mask_labels: vec![8],
            is_next: true,
        };
        let mut buf = Vec::new();
        encode_record(&e, 2, &mut buf).unwrap();
        assert_eq!(buf.len(), record_bytes(5, 2));
        assert_eq!(decode_record(&buf, 5, 2).unwrap(), e);
    }
}
