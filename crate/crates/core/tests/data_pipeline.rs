use std::collections::HashSet;

use deskbert::data::vocab::{is_special, MASK, PAD};
use deskbert::data::{
    decode_record, encode_record, encode_shard, make_examples, record_bytes, shard_dataset,
    Batch, DataError, ShardReader, SyntheticCorpus, TrainingExample, HEADER_BYTES,
};
use proptest::prelude::*;

fn corpus(n: usize) -> Vec<Vec<u32>> {
    SyntheticCorpus {
        sentences: n,
        ..SyntheticCorpus::default()
    }
    .generate(11)
}

fn examples(n: usize) -> Vec<TrainingExample> {
    make_examples(&corpus(n + 1), 64, 10, 5).unwrap()
}

#[test]
fn masking_and_pairing_statistics() {
    let ex = make_examples(&corpus(10_001), 128, 20, 1).unwrap();
    assert_eq!(ex.len(), 10_000);
    let next = ex.iter().filter(|e| e.is_next).count() as f64 / ex.len() as f64;
    assert!((0.48..=0.52).contains(&next), "is_next fraction {next}");
    let candidates: usize = ex.iter().map(|e| e.candidate_count()).sum();
    let masked: usize = ex.iter().map(|e| e.mask_positions.len()).sum();
    assert!(candidates >= 100_000);
    let frac = masked as f64 / candidates as f64;
    assert!((0.14..=0.16).contains(&frac), "masked fraction {frac}");
    for e in &ex {
        let uniq: HashSet<_> = e.mask_positions.iter().collect();
        assert_eq!(uniq.len(), e.mask_positions.len());
        for (&p, &l) in e.mask_positions.iter().zip(&e.mask_labels) {
            assert_eq!(e.ids[p as usize], MASK);
            assert!(!is_special(l) && l != PAD);
        }
    }
}

#[test]
fn examples_are_deterministic() {
    let c = corpus(500);
    assert_eq!(make_examples(&c, 64, 10, 9).unwrap(), make_examples(&c, 64, 10, 9).unwrap());
    assert_ne!(make_examples(&c, 64, 10, 9).unwrap(), make_examples(&c, 64, 10, 10).unwrap());
}

#[test]
fn random_partner_is_never_adjacent() {
    let c: Vec<Vec<u32>> = (0..50).map(|i| vec![100 + i]).collect();
    for (i, e) in make_examples(&c, 8, 1, 3).unwrap().iter().enumerate() {
        // segment b holds exactly one token here, possibly masked
        let b_pos = e.segments.iter().position(|&s| s == 1).unwrap();
        let tok = match e.mask_positions.iter().position(|&p| p as usize == b_pos) {
            Some(k) => e.mask_labels[k],
            None => e.ids[b_pos],
        };
        let j = (tok - 100) as usize;
        if e.is_next {
            assert_eq!(j, i + 1);
        } else {
            assert!(j != i && j != i + 1);
        }
    }
}

fn read_shard(path: &std::path::Path) -> Vec<TrainingExample> {
    ShardReader::open(path).unwrap().read_all().unwrap()
}

#[test]
fn ten_examples_three_shards() {
    let dir = tempfile::tempdir().unwrap();
    let paths = shard_dataset(&examples(10), 3, 10, 1, dir.path()).unwrap();
    let sizes: Vec<usize> = paths.iter().map(|p| ShardReader::open(p).unwrap().len()).collect();
    assert_eq!(sizes, vec![4, 3, 3]);
}

#[test]
fn single_shard_is_the_shuffled_serialization() {
    let ex = examples(40);
    let dir = tempfile::tempdir().unwrap();
    let paths = shard_dataset(&ex, 1, 10, 77, dir.path()).unwrap();
    let bytes = std::fs::read(&paths[0]).unwrap();
    let back = read_shard(&paths[0]);
    let refs: Vec<&TrainingExample> = back.iter().collect();
    assert_eq!(bytes, encode_shard(&refs, 64, 10, 77).unwrap());
    assert_eq!(&bytes[..4], b"BSHD");
    let mut a = back.clone();
    let mut b = ex.clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    assert_ne!(back, ex, "shuffle should reorder 40 examples");
}

#[test]
fn shards_partition_the_dataset() {
    let ex = examples(1000);
    let mut sorted = ex.clone();
    sorted.sort();
    for n in [1usize, 2, 3, 8, 256] {
        let dir = tempfile::tempdir().unwrap();
        let paths = shard_dataset(&ex, n, 10, 3, dir.path()).unwrap();
        assert_eq!(paths.len(), n);
        let shards: Vec<Vec<TrainingExample>> = paths.iter().map(|p| read_shard(p)).collect();
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut union: Vec<TrainingExample> = shards.into_iter().flatten().collect();
        union.sort();
        assert_eq!(union, sorted, "n = {n}");
    }
}

#[test]
fn reader_touches_only_its_share() {
    let ex = examples(1000);
    let rb = record_bytes(64, 10) as u64;
    for n in [1usize, 3, 8] {
        let dir = tempfile::tempdir().unwrap();
        let paths = shard_dataset(&ex, n, 10, 3, dir.path()).unwrap();
        for p in &paths {
            let mut r = ShardReader::open(p).unwrap();
            let mut seen = 0;
            for b in r.epoch(1, 7) {
                seen += b.unwrap().len();
            }
            assert_eq!(seen, r.len());
            let bound = (ex.len() as u64).div_ceil(n as u64) * rb + HEADER_BYTES as u64;
            assert!(r.bytes_read() <= bound);
        }
    }
}

#[test]
fn epochs_are_seeded() {
    let ex = examples(200);
    let dir = tempfile::tempdir().unwrap();
    let paths = shard_dataset(&ex, 1, 10, 3, dir.path()).unwrap();
    let order = |seed: u64| -> Vec<TrainingExample> {
        let mut r = ShardReader::open(&paths[0]).unwrap();
        r.epoch(seed, 16).flat_map(|b| b.unwrap()).collect()
    };
    let a = order(1);
    assert_eq!(a, order(1));
    let b = order(2);
    assert_eq!(a.len(), 200);
    // count discordant pairs between the two orders
    let pos: std::collections::HashMap<&TrainingExample, usize> =
        b.iter().enumerate().map(|(i, e)| (e, i)).collect();
    let ranks: Vec<usize> = a.iter().map(|e| pos[e]).collect();
    let mut discordant = 0;
    for i in 0..ranks.len() {
        for j in i + 1..ranks.len() {
            if ranks[i] > ranks[j] {
                discordant += 1;
            }
        }
    }
    assert!(discordant > 0);
}

#[test]
fn corrupt_shards_are_rejected() {
    let ex = examples(5);
    let dir = tempfile::tempdir().unwrap();
    let p = &shard_dataset(&ex, 1, 10, 3, dir.path()).unwrap()[0];
    let good = std::fs::read(p).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(p, &bad).unwrap();
    assert!(matches!(ShardReader::open(p), Err(DataError::CorruptShard(_))));

    let mut bad = good.clone();
    bad[4] = 2;
    std::fs::write(p, &bad).unwrap();
    assert!(matches!(ShardReader::open(p), Err(DataError::CorruptShard(_))));

    std::fs::write(p, &good[..good.len() - 1]).unwrap();
    assert!(matches!(ShardReader::open(p), Err(DataError::CorruptShard(_))));
}

#[test]
fn batches_flatten_positions() {
    let ex = examples(3);
    let b = Batch::from_examples(&ex).unwrap();
    assert_eq!(b.ids.len(), 3 * 64);
    let k0 = ex[0].mask_positions.len();
    assert_eq!(b.mask_positions[k0], 64 + ex[1].mask_positions[0] as usize);
    assert_eq!(b.masked_count(), ex.iter().map(|e| e.mask_labels.len()).sum::<usize>());
}

proptest! {
    #[test]
    fn record_round_trip(
        ids in prop::collection::vec(0u32..50_000, 8..40),
        next in any::<bool>(),
        k in 0usize..5,
        seed in any::<u64>(),
    ) {
        let len = ids.len();
        let mut positions: Vec<u32> = (0..len as u32).collect();
        positions.rotate_left((seed % len as u64) as usize);
        let mut positions: Vec<u32> = positions.into_iter().take(k).collect();
        positions.sort();
        let e = TrainingExample {
            segments: ids.iter().map(|&t| (t % 2) as u8).collect(),
            mask_labels: positions.iter().map(|&p| p * 3 + 7).collect(),
            ids,
            mask_positions: positions,
            is_next: next,
        };
        let mut buf = Vec::new();
        encode_record(&e, 6, &mut buf).unwrap();
        prop_assert_eq!(decode_record(&buf, len, 6).unwrap(), e);
    }
}
