//! Corpus preparation: tokenization, masked sentence-pair examples and the
//! binary shard format.

mod corpus;
mod examples;
mod shard;
pub mod vocab;

use thiserror::Error;

pub use corpus::SyntheticCorpus;
pub use examples::{make_examples, num_predictions, Batch, TrainingExample, MASK_RATE};
pub use shard::{
    decode_record, encode_record, encode_shard, record_bytes, shard_dataset, shard_file_name,
    EpochIter, FeistelPermutation, ShardHeader, ShardReader, HEADER_BYTES, MAGIC, VERSION,
};
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus has {0} sentences, need at least 2")]
    CorpusTooSmall(usize),
    #[error("corrupt shard: {0}")]
    CorruptShard(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
