use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::vocab::SPECIAL_TOKENS;

/// Parameters of the synthetic topic corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCorpus {
    pub sentences: usize,
    /// Vocabulary size including the special tokens.
    pub vocab: usize,
    pub topics: usize,
    /// Mean number of consecutive sentences sharing a topic.
    pub topic_run: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            sentences: 10_000,
            vocab: 1000,
            topics: 16,
            topic_run: 8,
            min_len: 8,
            max_len: 24,
        }
    }
}

impl SyntheticCorpus {
    /// Token-id sentences. Each topic owns a band of the vocabulary and
    /// samples from it with Zipf weights; a small share of every sentence
    /// comes from a common function-word band. Sentences within a topic run
    /// follow a loose bigram pattern so masked tokens are predictable from
    /// context and adjacent sentences are recognisably related.
    pub fn generate(&self, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = SPECIAL_TOKENS.len() as u32;
        let words = (self.vocab as u32).saturating_sub(first).max(2);
        let common = (words / 10).max(1);
        let band = ((words - common) / self.topics.max(1) as u32).max(1);
        let zipf_band = Zipf::new(band as f64, 1.1).expect("valid zipf");
        let zipf_common = Zipf::new(common as f64, 1.1).expect("valid zipf");
        let mut out = Vec::with_capacity(self.sentences);
        let mut topic = 0u32;
        let mut left = 0usize;
        while out.len() < self.sentences {
            if left == 0 {
                topic = rng.random_range(0..self.topics.max(1) as u32);
                left = rng.random_range(1..=2 * self.topic_run.max(1));
            }
            left -= 1;
            let len = rng.random_range(self.min_len..=self.max_len.max(self.min_len));
            let base = first + common + topic * band;
            let mut s = Vec::with_capacity(len);
            let mut prev: Option<u32> = None;
            for _ in 0..len {
                let id = if rng.random::<f32>() < 0.25 {
                    first + zipf_common.sample(&mut rng) as u32 - 1
                } else if let (Some(p), true) = (prev, rng.random::<f32>() < 0.5) {
                    // successor of the previous topic word
                    base + (p - base + 1) % band
                } else {
                    base + zipf_band.sample(&mut rng) as u32 - 1
                };
                if id >= base {
                    prev = Some(id);
                }
                s.push(id.min(self.vocab as u32 - 1));
            }
            out.push(s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_stay_in_range_and_are_deterministic() {
        let c = SyntheticCorpus {
            sentences: 200,
            vocab: 100,
            ..SyntheticCorpus::default()
        };
        let a = c.generate(3);
        assert_eq!(a, c.generate(3));
        assert_eq!(a.len(), 200);
        assert!(a.iter().flatten().all(|&t| (5..100).contains(&t)));
    }
}
