use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionPolicy {
    Iid,
    BySource,
}

/// Half-open token range `[start, end)` inside one corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRange {
    pub corpus: usize,
    pub start: usize,
    pub end: usize,
}

impl TokenRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Assignment of whole token blocks to clients. Immutable and cheap to clone.
#[derive(Clone, Debug)]
pub struct ShardPlan {
    corpora: Arc<Vec<Corpus>>,
    shards: Arc<Vec<Vec<TokenRange>>>,
    block_len: usize,
    policy: PartitionPolicy,
}

impl ShardPlan {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn policy(&self) -> PartitionPolicy {
        self.policy
    }

    pub fn corpora(&self) -> &[Corpus] {
        &self.corpora
    }

    /// The blocks of one client, each exactly `block_len` tokens.
    pub fn blocks(&self, client: usize) -> Result<&[TokenRange]> {
        self.shards
            .get(client)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Lookup {
                kind: "client",
                name: client.to_string(),
            })
    }

    pub fn block_tokens(&self, range: &TokenRange) -> &[u16] {
        &self.corpora[range.corpus].tokens[range.start..range.end]
    }

    pub fn shard_tokens(&self, client: usize) -> Result<usize> {
        Ok(self.blocks(client)?.iter().map(TokenRange::len).sum())
    }

    /// Source labels present in a client's shard.
    pub fn client_sources(&self, client: usize) -> Result<Vec<super::Style>> {
        let mut labels: Vec<_> = self
            .blocks(client)?
            .iter()
            .map(|r| self.corpora[r.corpus].source_label)
            .collect();
        labels.sort();
        labels.dedup();
        Ok(labels)
    }

    /// Splits one client's blocks IID across `n_nodes` equal node shards.
    pub fn subpartition(&self, client: usize, n_nodes: usize, seed: u64) -> Result<ShardPlan> {
        if n_nodes == 0 {
            return Err(Error::Config("sub-partition into zero nodes".into()));
        }
        let mut blocks = self.blocks(client)?.to_vec();
        if blocks.len() < n_nodes {
            return Err(Error::Config(format!(
                "client {client} has {} blocks, fewer than {n_nodes} nodes",
                blocks.len()
            )));
        }
        let mut rng = seed::rng(seed, Purpose::SubPartition, &[client as u64]);
        blocks.shuffle(&mut rng);
        let per = blocks.len() / n_nodes;
        let shards = (0..n_nodes)
            .map(|i| blocks[i * per..(i + 1) * per].to_vec())
            .collect();
        Ok(ShardPlan {
            corpora: self.corpora.clone(),
            shards: Arc::new(shards),
            block_len: self.block_len,
            policy: PartitionPolicy::Iid,
        })
    }
}

fn blocks_of(corpus_index: usize, corpus: &Corpus, block_len: usize) -> Vec<TokenRange> {
    (0..corpus.len() / block_len)
        .map(|b| TokenRange {
            corpus: corpus_index,
            start: b * block_len,
            end: (b + 1) * block_len,
        })
        .collect()
}

/// Shuffles `seq_len + 1` token blocks and deals them into `n_shards` shards
/// whose sizes differ by at most one block. Only the trailing partial block
/// of the corpus is dropped.
pub fn partition_iid(corpus: Corpus, n_shards: usize, seq_len: usize, seed: u64) -> Result<ShardPlan> {
    if n_shards == 0 {
        return Err(Error::Config("n_shards must be at least 1".into()));
    }
    let block_len = seq_len + 1;
    let mut blocks = blocks_of(0, &corpus, block_len);
    if blocks.len() < n_shards {
        return Err(Error::Config(format!(
            "{} tokens give {} blocks, fewer than {n_shards} shards",
            corpus.len(),
            blocks.len()
        )));
    }
    let mut rng = seed::rng(seed, Purpose::Partition, &[n_shards as u64]);
    blocks.shuffle(&mut rng);
    let (per, extra) = (blocks.len() / n_shards, blocks.len() % n_shards);
    let mut shards = Vec::with_capacity(n_shards);
    let mut start = 0;
    for i in 0..n_shards {
        let len = per + usize::from(i < extra);
        shards.push(blocks[start..start + len].to_vec());
        start += len;
    }
    Ok(ShardPlan {
        corpora: Arc::new(vec![corpus]),
        shards: Arc::new(shards),
        block_len,
        policy: PartitionPolicy::Iid,
    })
}

/// One contiguous equal slice of each source per client; client
/// `s * clients_per_source + j` holds slice `j` of source `s`.
pub fn partition_by_source(
    corpora: Vec<Corpus>,
    clients_per_source: usize,
    seq_len: usize,
) -> Result<ShardPlan> {
    if corpora.is_empty() {
        return Err(Error::Config("by-source partition needs at least one corpus".into()));
    }
    if clients_per_source == 0 {
        return Err(Error::Config("clients_per_source must be at least 1".into()));
    }
    let block_len = seq_len + 1;
    let mut shards = Vec::with_capacity(corpora.len() * clients_per_source);
    for (ci, corpus) in corpora.iter().enumerate() {
        let blocks = blocks_of(ci, corpus, block_len);
        if blocks.len() < clients_per_source {
            return Err(Error::Config(format!(
                "source {} has {} blocks for {clients_per_source} clients",
                corpus.source_label,
                blocks.len()
            )));
        }
        let per = blocks.len() / clients_per_source;
        for j in 0..clients_per_source {
            shards.push(blocks[j * per..(j + 1) * per].to_vec());
        }
    }
    Ok(ShardPlan {
        corpora: Arc::new(corpora),
        shards: Arc::new(shards),
        block_len,
        policy: PartitionPolicy::BySource,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, Style};
    use proptest::prelude::*;

    fn multiset(tokens: impl IntoIterator<Item = u16>) -> Vec<usize> {
        let mut counts = vec![0usize; 64];
        for t in tokens {
            counts[t as usize] += 1;
        }
        counts
    }

    #[test]
    fn one_shard_is_the_whole_corpus() {
        let c = generate_corpus(Style::Web, 17 * 40, 64, 16, 1).unwrap();
        let plan = partition_iid(c.clone(), 1, 16, 3).unwrap();
        assert_eq!(plan.num_clients(), 1);
        assert_eq!(plan.shard_tokens(0).unwrap(), c.len());
        let tokens = plan.blocks(0).unwrap().iter().flat_map(|r| plan.block_tokens(r).iter().copied());
        assert_eq!(multiset(tokens), multiset(c.tokens.iter().copied()));
    }

    #[test]
    fn sixty_four_equal_shards_cover_the_corpus() {
        let seq = 8;
        let c = generate_corpus(Style::Web, 64 * 10 * (seq + 1), 64, seq, 5).unwrap();
        let plan = partition_iid(c.clone(), 64, seq, 9).unwrap();
        assert_eq!(plan.num_clients(), 64);
        for k in 0..64 {
            assert_eq!(plan.shard_tokens(k).unwrap(), 10 * (seq + 1));
        }
        let union = (0..64).flat_map(|k| {
            plan.blocks(k)
                .unwrap()
                .iter()
                .flat_map(|r| plan.block_tokens(r).iter().copied())
                .collect::<Vec<_>>()
        });
        assert_eq!(multiset(union), multiset(c.tokens.iter().copied()));
    }

    #[test]
    fn too_few_tokens_is_config_error() {
        let c = generate_corpus(Style::Web, 30, 64, 8, 5).unwrap();
        assert!(matches!(partition_iid(c, 4, 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn by_source_client_counts_and_purity() {
        let corpora = |n: usize| -> Vec<Corpus> {
            Style::ALL
                .iter()
                .take(n)
                .map(|&s| generate_corpus(s, 4000, 64, 15, 2).unwrap())
                .collect()
        };
        let plan = partition_by_source(corpora(4), 1, 15).unwrap();
        assert_eq!(plan.num_clients(), 4);
        for k in 0..4 {
            assert_eq!(plan.client_sources(k).unwrap(), vec![Style::ALL[k]]);
        }
        let plan = partition_by_source(corpora(4), 4, 15).unwrap();
        assert_eq!(plan.num_clients(), 16);
        for k in 0..16 {
            assert_eq!(plan.client_sources(k).unwrap().len(), 1);
        }
        assert!(matches!(partition_by_source(vec![], 2, 15), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_client_is_lookup_error() {
        let c = generate_corpus(Style::Web, 1000, 64, 9, 5).unwrap();
        let plan = partition_iid(c, 2, 9, 0).unwrap();
        assert!(matches!(plan.blocks(2), Err(Error::Lookup { .. })));
    }

    proptest! {
        #[test]
        fn iid_shards_are_disjoint_balanced_and_complete(
            n_shards in 1usize..12, blocks in 12usize..60, seed in 0u64..1000
        ) {
            let seq = 7;
            let extra = (seed % 5) as usize; // partial trailing block
            let c = generate_corpus(Style::Prose, blocks * (seq + 1) + extra, 64, seq, seed).unwrap();
            let plan = partition_iid(c.clone(), n_shards, seq, seed).unwrap();
            let mut starts: Vec<usize> = (0..n_shards)
                .flat_map(|k| plan.blocks(k).unwrap().iter().map(|r| r.start).collect::<Vec<_>>())
                .collect();
            let total = starts.len();
            starts.sort();
            starts.dedup();
            prop_assert_eq!(starts.len(), total);
            let sizes: Vec<usize> = (0..n_shards).map(|k| plan.shard_tokens(k).unwrap()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= seq + 1);
            prop_assert!(c.len() - total * (seq + 1) < seq + 1);
        }
    }
}
