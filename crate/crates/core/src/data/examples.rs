use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{is_special, CLS, MASK, PAD, SEP};
use super::DataError;

/// Fraction of candidate tokens selected for prediction.
pub const MASK_RATE: f64 = 0.15;

/// One sentence-pair pre-training example.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingExample {
    /// `[CLS] a… [SEP] b… [SEP]` followed by padding, with masked positions
    /// replaced by `[MASK]`.
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    /// Sorted, unique positions selected for prediction.
    pub mask_positions: Vec<u32>,
    /// Original ids at `mask_positions`.
    pub mask_labels: Vec<u32>,
    pub is_next: bool,
}

impl TrainingExample {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    /// Non-special token positions, masked ones included.
    pub fn candidate_count(&self) -> usize {
        self.ids
            .iter()
            .filter(|&&t| t == MASK || !is_special(t))
            .count()
    }
}

/// Number of predictions for a sequence with `candidates` maskable tokens.
pub fn num_predictions(candidates: usize, max_pred: usize) -> usize {
    if candidates == 0 {
        return 0;
    }
    let n = (MASK_RATE * candidates as f64).round() as usize;
    n.clamp(1, max_pred.min(candidates))
}

fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// Pair every sentence with its successor or, with probability one half, a
/// random sentence that is neither itself nor its successor, then mask.
///
/// When the corpus is too small to offer a non-adjacent partner, the true
/// successor is used.
pub fn make_examples(
    sentences: &[Vec<u32>],
    seq_len: usize,
    max_pred: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>, DataError> {
    if sentences.len() < 2 {
        return Err(DataError::CorpusTooSmall(sentences.len()));
    }
    if seq_len < 5 {
        return Err(DataError::Invalid(format!("sequence length {seq_len} below 5")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sentences.len();
    let mut out = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let mut is_next = rng.random::<bool>();
        let j = if is_next || n < 3 {
            is_next = true;
            i + 1
        } else {
            // uniform over all indices except i and i+1
            let mut j = rng.random_range(0..n - 2);
            if j >= i {
                j += 2;
            }
            j
        };
        let mut a = sentences[i].clone();
        let mut b = sentences[j].clone();
        truncate_pair(&mut a, &mut b, seq_len - 3);
        let mut ids = Vec::with_capacity(seq_len);
        let mut segments = Vec::with_capacity(seq_len);
        ids.push(CLS);
        ids.extend_from_slice(&a);
        ids.push(SEP);
        segments.resize(ids.len(), 0);
        ids.extend_from_slice(&b);
        ids.push(SEP);
        segments.resize(ids.len(), 1);
        ids.resize(seq_len, PAD);
        segments.resize(seq_len, 0);

        let candidates: Vec<usize> = (0..seq_len).filter(|&p| !is_special(ids[p])).collect();
        let k = num_predictions(candidates.len(), max_pred);
        let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), k)
            .into_iter()
            .map(|c| candidates[c])
            .collect();
        picked.sort_unstable();
        let mask_labels = picked.iter().map(|&p| ids[p]).collect();
        for &p in &picked {
            ids[p] = MASK;
        }
        out.push(TrainingExample {
            ids,
            segments,
            mask_positions: picked.iter().map(|&p| p as u32).collect(),
            mask_labels,
            is_next,
        });
    }
    Ok(out)
}

/// A batch of examples laid out for the model. Positions are flattened to
/// `example * seq_len + position`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub mask_positions: Vec<usize>,
    pub mask_labels: Vec<usize>,
    pub is_next: Vec<bool>,
}

impl Batch {
    pub fn from_examples(examples: &[TrainingExample]) -> Result<Batch, DataError> {
        let Some(first) = examples.first() else {
            return Err(DataError::Invalid("empty batch".into()));
        };
        let seq_len = first.seq_len();
        let mut b = Batch {
            size: examples.len(),
            seq_len,
            ids: Vec::with_capacity(seq_len * examples.len()),
            segments: Vec::with_capacity(seq_len * examples.len()),
            mask_positions: Vec::new(),
            mask_labels: Vec::new(),
            is_next: Vec::with_capacity(examples.len()),
        };
        for (e, ex) in examples.iter().enumerate() {
            if ex.seq_len() != seq_len {
                return Err(DataError::Invalid("mixed sequence lengths in batch".into()));
            }
            b.ids.extend_from_slice(&ex.ids);
            b.segments.extend_from_slice(&ex.segments);
            b.mask_positions
                .extend(ex.mask_positions.iter().map(|&p| e * seq_len + p as usize));
            b.mask_labels.extend(ex.mask_labels.iter().map(|&l| l as usize));
            b.is_next.push(ex.is_next);
        }
        Ok(b)
    }

    pub fn masked_count(&self) -> usize {
        self.mask_positions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_counts() {
        assert_eq!(num_predictions(0, 20), 0);
        assert_eq!(num_predictions(3, 20), 1);
        assert_eq!(num_predictions(100, 20), 15);
        assert_eq!(num_predictions(500, 20), 20);
    }

    #[test]
    fn layout_of_an_example() {
        let s = vec![vec![10, 11, 12], vec![20, 21], vec![30]];
        let ex = make_examples(&s, 12, 2, 1).unwrap();
        assert_eq!(ex.len(), 2);
        let e = &ex[0];
        assert_eq!(e.ids.len(), 12);
        assert_eq!(e.ids[0], CLS);
        assert_eq!(e.segments[..5], [0, 0, 0, 0, 0]);
        assert_eq!(e.mask_positions.len(), e.mask_labels.len());
        for (&p, &l) in e.mask_positions.iter().zip(&e.mask_labels) {
            assert_eq!(e.ids[p as usize], MASK);
            assert!(!is_special(l));
        }
    }

    #[test]
    fn long_pairs_are_truncated() {
        let s = vec![vec![7; 100], vec![8; 100]];
        let e = &make_examples(&s, 16, 3, 0).unwrap()[0];
        assert_eq!(e.ids.len(), 16);
        assert_eq!(e.ids[15], SEP);
    }

    #[test]
    fn tiny_corpus_is_rejected() {
        assert!(matches!(
            make_examples(&[vec![5]], 8, 1, 0),
            Err(DataError::CorpusTooSmall(1))
        ));
    }
}
