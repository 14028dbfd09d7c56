//! Synthetic text sources, character-level tokenization, IID and by-source
//! partitioning, and deterministic per-client batch streams.
//!
//! Corpora are pre-tokenized and held in memory. Partitioning works on
//! blocks of `seq_len + 1` tokens so every training window stays contiguous;
//! tokens that do not fill a whole block are dropped.

mod corpus;
mod partition;
mod stream;

pub use corpus::{generate_corpus, read_corpus, write_corpus, Alphabet, Corpus, Style};
pub use partition::{partition_by_source, partition_iid, PartitionPolicy, ShardPlan, TokenRange};
pub use stream::{eval_batches, BatchStream, StreamCursor};
