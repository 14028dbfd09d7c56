use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::partition::ShardPlan;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::seed::{self, Purpose};

/// Position in a client's stream: the epoch and the number of blocks already
/// consumed from it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamCursor {
    pub epoch: u64,
    pub position: u64,
}

/// Deterministic batches over one client's blocks.
///
/// Each epoch visits every block once in an order shuffled by
/// `(seed, client, epoch)`; a batch that runs past the end of an epoch
/// continues into the next, reshuffled one.
#[derive(Clone, Debug)]
pub struct BatchStream {
    plan: ShardPlan,
    client: usize,
    batch_size: usize,
    seed: u64,
    cursor: StreamCursor,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(
        plan: ShardPlan,
        client: usize,
        batch_size: usize,
        seq_len: usize,
        seed: u64,
        cursor: StreamCursor,
    ) -> Result<Self> {
        let n_blocks = plan.blocks(client)?.len();
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if plan.block_len() != seq_len + 1 {
            return Err(Error::Config(format!(
                "plan blocks of {} tokens cannot feed sequences of {seq_len}",
                plan.block_len()
            )));
        }
        if n_blocks == 0 {
            return Err(Error::Config(format!("client {client} has an empty shard")));
        }
        if cursor.position as usize >= n_blocks {
            return Err(Error::Config(format!(
                "cursor position {} beyond {n_blocks} blocks",
                cursor.position
            )));
        }
        let mut stream = Self {
            plan,
            client,
            batch_size,
            seed,
            cursor,
            order: Vec::new(),
        };
        stream.order = stream.epoch_order(cursor.epoch);
        Ok(stream)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let n = self.plan.blocks(self.client).expect("validated").len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(self.seed, Purpose::Stream, &[self.client as u64, epoch]);
        order.shuffle(&mut rng);
        order
    }

    pub fn cursor(&self) -> StreamCursor {
        self.cursor
    }

    pub fn client(&self) -> usize {
        self.client
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn blocks_per_epoch(&self) -> usize {
        self.order.len()
    }

    /// The next window of `seq_len + 1` tokens.
    pub fn next_window(&mut self) -> &[u16] {
        let idx = self.order[self.cursor.position as usize];
        self.cursor.position += 1;
        if self.cursor.position as usize == self.order.len() {
            self.cursor = StreamCursor {
                epoch: self.cursor.epoch + 1,
                position: 0,
            };
            self.order = self.epoch_order(self.cursor.epoch);
        }
        let blocks = self.plan.blocks(self.client).expect("validated");
        self.plan.block_tokens(&blocks[idx])
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut windows: Vec<Vec<u16>> = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            windows.push(self.next_window().to_vec());
        }
        Batch::from_windows(windows.iter().map(|w| w.as_slice())).expect("uniform windows")
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Fixed held-out batches: the first windows of each corpus taken
/// round-robin, `n_sequences` in total.
pub fn eval_batches(
    corpora: &[Corpus],
    n_sequences: usize,
    seq_len: usize,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    if corpora.is_empty() || n_sequences == 0 || batch_size == 0 {
        return Err(Error::Config("evaluation needs corpora, sequences and a batch size".into()));
    }
    let block = seq_len + 1;
    let mut windows: Vec<&[u16]> = Vec::with_capacity(n_sequences);
    let mut index = 0;
    while windows.len() < n_sequences {
        let corpus = &corpora[index % corpora.len()];
        let w = index / corpora.len();
        let slice = corpus.tokens.get(w * block..(w + 1) * block).ok_or_else(|| {
            Error::Config(format!(
                "held-out {} corpus too short for {n_sequences} sequences",
                corpus.source_label
            ))
        })?;
        windows.push(slice);
        index += 1;
    }
    windows
        .chunks(batch_size)
        .map(|c| Batch::from_windows(c.iter().copied()))
        .collect()
}
