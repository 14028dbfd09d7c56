//! Client-side work of a round: picking a training strategy for the
//! client's hardware, running the local steps, optional node-level
//! sub-federation, and post-processing of the local model.

use serde::{Deserialize, Serialize};

use crate::cost::BYTES_PER_MB;
use crate::data::{BatchStream, ShardPlan, StreamCursor};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::optim::{LocalOptimizerSpec, LrSchedule};
use crate::registry;
use crate::tensor::ParamVector;

/// Usable share of device memory.
const VRAM_HEADROOM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interconnect {
    Rdma,
    LowBandwidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientHardware {
    pub n_nodes: usize,
    pub gpus_per_node: usize,
    pub vram_per_gpu_mb: f64,
    pub interconnect: Interconnect,
    /// Weight memory of the model in MB.
    pub model_mem_estimate_mb: f64,
    /// Upper bound on the per-GPU batch.
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
}

fn default_max_batch() -> usize {
    32
}

impl ClientHardware {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.gpus_per_node == 0 || self.max_batch == 0 {
            return Err(Error::Config("client hardware counts must be at least 1".into()));
        }
        if !(self.vram_per_gpu_mb > 0.0 && self.vram_per_gpu_mb.is_finite()) {
            return Err(Error::Config("client vram must be positive".into()));
        }
        if !(self.model_mem_estimate_mb >= 0.0 && self.model_mem_estimate_mb.is_finite()) {
            return Err(Error::Config("model memory estimate must be >= 0".into()));
        }
        Ok(())
    }

    /// Weights, gradients and both AdamW moments.
    pub fn static_footprint_mb(&self) -> f64 {
        4.0 * self.model_mem_estimate_mb
    }

    pub fn total_vram_mb(&self) -> f64 {
        (self.n_nodes * self.gpus_per_node) as f64 * self.vram_per_gpu_mb
    }
}

/// Activation memory of one training sequence kept for the backward pass.
pub fn activation_mb_per_sample(cfg: &ModelConfig) -> f64 {
    let (t, d, h, v) = (cfg.seq_len, cfg.d_model, cfg.hidden(), cfg.vocab_size);
    let per_block = 9 * d + 2 * h + cfg.n_heads * t;
    let values = t * (cfg.n_blocks * per_block + 3 * d + 2 * v);
    (values * 8) as f64 / BYTES_PER_MB
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    SingleGpu,
    Ddp,
    Fsdp,
    SubFederation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub node_batch_sizes: Vec<usize>,
}

fn largest_batch(budget_mb: f64, static_mb: f64, per_sample_mb: f64, cap: usize) -> usize {
    let mut best = 1;
    let mut b = 1;
    while b <= cap {
        if static_mb + b as f64 * per_sample_mb <= budget_mb {
            best = b;
        }
        b *= 2;
    }
    best
}

/// Largest power-of-two per-GPU batch whose memory fits 90% of one GPU,
/// capped at `hw.max_batch`, never below 1.
pub fn calc_batch_size(hw: &ClientHardware, cfg: &ModelConfig) -> Result<usize> {
    hw.validate()?;
    Ok(largest_batch(
        VRAM_HEADROOM * hw.vram_per_gpu_mb,
        hw.static_footprint_mb(),
        activation_mb_per_sample(cfg),
        hw.max_batch,
    ))
}

/// Picks how a client trains on its hardware.
pub fn select_strategy(hw: &ClientHardware, cfg: &ModelConfig) -> Result<Strategy> {
    hw.validate()?;
    let static_mb = hw.static_footprint_mb();
    let act = activation_mb_per_sample(cfg);
    if static_mb + act > VRAM_HEADROOM * hw.total_vram_mb() {
        return Err(Error::Capacity(format!(
            "model needs {:.1} MB but the client has {:.1} MB usable",
            static_mb + act,
            VRAM_HEADROOM * hw.total_vram_mb()
        )));
    }
    let fits_one_gpu = static_mb + act <= VRAM_HEADROOM * hw.vram_per_gpu_mb;
    let per_gpu = if fits_one_gpu {
        calc_batch_size(hw, cfg)?
    } else {
        let shard = static_mb / hw.gpus_per_node as f64;
        largest_batch(VRAM_HEADROOM * hw.vram_per_gpu_mb, shard, act, hw.max_batch)
    };
    let per_node = per_gpu * hw.gpus_per_node;
    let kind = if hw.n_nodes > 1 && hw.interconnect == Interconnect::LowBandwidth {
        StrategyKind::SubFederation
    } else if hw.n_nodes == 1 && hw.gpus_per_node == 1 {
        if !fits_one_gpu {
            return Err(Error::Capacity("model and one sample exceed the single GPU".into()));
        }
        StrategyKind::SingleGpu
    } else if fits_one_gpu {
        StrategyKind::Ddp
    } else {
        StrategyKind::Fsdp
    };
    let node_batch_sizes = match kind {
        StrategyKind::SubFederation => vec![per_node; hw.n_nodes],
        _ => vec![per_node * hw.n_nodes],
    };
    Ok(Strategy {
        kind,
        node_batch_sizes,
    })
}

/// Local step counts swept by the compute/time trade-off experiments.
pub const LOCAL_STEPS_GRID: [u64; 3] = [64, 128, 512];

/// Everything a client needs to train for one round besides its data.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHyper {
    pub model: ModelConfig,
    pub local_steps: u64,
    pub schedule: LrSchedule,
    pub optimizer: LocalOptimizerSpec,
    /// Simulated client throughput in batches per second.
    pub throughput: f64,
}

impl LocalHyper {
    /// Number of sequential steps taken before `round` (rounds count from 1).
    pub fn step_offset(&self, round: u64) -> u64 {
        round.saturating_sub(1) * self.local_steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientResult {
    pub client: usize,
    pub params: ParamVector,
    pub losses: Vec<f64>,
    pub tokens: Vec<usize>,
    pub step_times: Vec<f64>,
    /// Stream position of every node after the round.
    pub cursors: Vec<StreamCursor>,
}

impl ClientResult {
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            return f64::NAN;
        }
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.iter().sum()
    }
}

/// `τ` steps from `global` with a fresh local optimizer.
pub fn run_local_round(
    global: &ParamVector,
    stream: &mut BatchStream,
    hp: &LocalHyper,
    round: u64,
    client: usize,
) -> Result<ClientResult> {
    let mut params = global.clone();
    let mut optimizer = registry::build_local_optimizer(&hp.optimizer, global)?;
    let offset = hp.step_offset(round);
    let step_time = 1.0 / hp.throughput;
    let n = hp.local_steps as usize;
    let (mut losses, mut tokens) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for step in 0..hp.local_steps {
        let diverged = |reason: String| Error::Divergence {
            client,
            round,
            step,
            reason,
        };
        let batch = stream.next_batch();
        let (loss, grads) = model::loss_and_grad(&hp.model, &params, &batch).map_err(|e| match e {
            Error::Numeric(m) => diverged(m),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        let lr = hp.schedule.lr_at(offset + step + 1);
        optimizer.step(&mut params, &grads, lr).map_err(|e| match e {
            Error::Numeric(m) => diverged(m),
            other => other,
        })?;
        losses.push(loss);
        tokens.push(batch.tokens());
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            client,
            round,
            step: hp.local_steps,
            reason: "parameters left the finite range".into(),
        });
    }
    Ok(ClientResult {
        client,
        params,
        step_times: vec![step_time; losses.len()],
        losses,
        tokens,
        cursors: vec![stream.cursor()],
    })
}

/// Trains each node from `global` on its own stream and averages the node
/// models uniformly. One node reduces to [`run_local_round`].
pub fn run_sub_federation(
    global: &ParamVector,
    streams: &mut [BatchStream],
    hp: &LocalHyper,
    round: u64,
    client: usize,
) -> Result<ClientResult> {
    match streams {
        [] => Err(Error::Config("sub-federation needs at least one node".into())),
        [only] => run_local_round(global, only, hp, round, client),
        _ => {
            let nodes = streams
                .iter_mut()
                .map(|s| run_local_round(global, s, hp, round, client))
                .collect::<Result<Vec<_>>>()?;
            let params = ParamVector::mean(nodes.iter().map(|r| &r.params))?;
            let steps = hp.local_steps as usize;
            // Per-step metrics aggregate across nodes: mean loss, summed
            // tokens, and the slowest node's step time.
            let losses = (0..steps)
                .map(|s| nodes.iter().map(|r| r.losses[s]).sum::<f64>() / nodes.len() as f64)
                .collect();
            let tokens = (0..steps).map(|s| nodes.iter().map(|r| r.tokens[s]).sum()).collect();
            let step_times = (0..steps)
                .map(|s| nodes.iter().map(|r| r.step_times[s]).fold(0.0, f64::max))
                .collect();
            let cursors = nodes.iter().flat_map(|r| r.cursors.iter().copied()).collect();
            Ok(ClientResult {
                client,
                params,
                losses,
                tokens,
                step_times,
                cursors,
            })
        }
    }
}

/// Per-client stream positions carried across rounds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStreamState {
    pub cursors: Vec<StreamCursor>,
}

/// Builds the data streams of one client: a single stream over the
/// client's shard, or one per node over an IID sub-partition.
pub fn client_streams(
    plan: &ShardPlan,
    client: usize,
    nodes: usize,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    state: &ClientStreamState,
) -> Result<Vec<BatchStream>> {
    let cursor = |i: usize| state.cursors.get(i).copied().unwrap_or_default();
    if nodes <= 1 {
        return Ok(vec![BatchStream::new(
            plan.clone(),
            client,
            batch_size,
            seq_len,
            seed,
            cursor(0),
        )?]);
    }
    let sub = plan.subpartition(client, nodes, seed)?;
    (0..nodes)
        .map(|n| {
            let node_seed = crate::seed::derive(seed, crate::seed::Purpose::Stream, &[client as u64]);
            BatchStream::new(sub.clone(), n, batch_size, seq_len, node_seed, cursor(n))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostProcessSpec {
    pub kind: String,
    pub max_update_norm: f64,
}

impl Default for PostProcessSpec {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            max_update_norm: 1.0,
        }
    }
}

/// Hook applied to a client model before it leaves the client.
pub trait PostProcessor: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, global: &ParamVector, local: ParamVector) -> Result<ParamVector>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl PostProcessor for Identity {
    fn name(&self) -> &'static str {
        "none"
    }

    fn apply(&self, _global: &ParamVector, local: ParamVector) -> Result<ParamVector> {
        Ok(local)
    }
}

/// Rescales the client update `θ_k − θ_t` to norm at most `max_norm`.
#[derive(Clone, Copy, Debug)]
pub struct ClipUpdateNorm {
    max_norm: f64,
}

impl ClipUpdateNorm {
    pub fn new(max_norm: f64) -> Result<Self> {
        if !(max_norm > 0.0) {
            return Err(Error::Config(format!("update clip norm {max_norm} must be positive")));
        }
        Ok(Self { max_norm })
    }
}

impl PostProcessor for ClipUpdateNorm {
    fn name(&self) -> &'static str {
        "clip-update"
    }

    fn apply(&self, global: &ParamVector, local: ParamVector) -> Result<ParamVector> {
        let update = local.sub(global)?;
        let norm = update.norm();
        if norm <= self.max_norm {
            return Ok(local);
        }
        let mut out = global.clone();
        out.axpy(self.max_norm / norm, &update)?;
        Ok(out)
    }
}
