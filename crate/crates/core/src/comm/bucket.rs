/// Default bucket size at desk scale.
pub const DEFAULT_BUCKET_BYTES: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketState {
    Filling,
    InFlight,
    Reduced,
}

/// Assignment of parameters to buckets. Parameters are taken in reverse
/// registration order, which is roughly the order backward produces their
/// gradients. A bucket closes before it would exceed the threshold, so only
/// a single parameter larger than the threshold yields an oversized bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketPlan {
    buckets: Vec<Vec<usize>>,
    bucket_of: Vec<usize>,
    sizes: Vec<usize>,
}

impl BucketPlan {
    pub fn new(sizes: &[usize], elem_bytes: usize, threshold: usize) -> BucketPlan {
        let mut buckets: Vec<Vec<usize>> = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        let mut cur_bytes = 0usize;
        for p in (0..sizes.len()).rev() {
            let b = sizes[p] * elem_bytes;
            if !cur.is_empty() && cur_bytes + b > threshold {
                buckets.push(std::mem::take(&mut cur));
                cur_bytes = 0;
            }
            cur.push(p);
            cur_bytes += b;
        }
        if !cur.is_empty() {
            buckets.push(cur);
        }
        BucketPlan::from_buckets(buckets, sizes)
    }

    /// Everything in one bucket.
    pub fn single(sizes: &[usize]) -> BucketPlan {
        BucketPlan::from_buckets(vec![(0..sizes.len()).rev().collect()], sizes)
    }

    fn from_buckets(buckets: Vec<Vec<usize>>, sizes: &[usize]) -> BucketPlan {
        let mut bucket_of = vec![usize::MAX; sizes.len()];
        for (b, ps) in buckets.iter().enumerate() {
            for &p in ps {
                bucket_of[p] = b;
            }
        }
        BucketPlan {
            buckets,
            bucket_of,
            sizes: sizes.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn params(&self, bucket: usize) -> &[usize] {
        &self.buckets[bucket]
    }

    pub fn bucket_of(&self, param: usize) -> usize {
        self.bucket_of[param]
    }

    /// Elements in a bucket's flat staging buffer.
    pub fn numel(&self, bucket: usize) -> usize {
        self.buckets[bucket].iter().map(|&p| self.sizes[p]).sum()
    }

    pub fn param_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Fingerprint compared across ranks before training starts.
    pub fn layout_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for byte in x.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for b in &self.buckets {
            eat(u64::MAX);
            for &p in b {
                eat(p as u64);
                eat(self.sizes[p] as u64);
            }
        }
        h
    }
}
