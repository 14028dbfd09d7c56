//! Reference trainers: simulated data-parallel training on one process and
//! the DiLoCo outer-optimizer preset.

use serde::{Deserialize, Serialize};

use crate::aggregator::FederationConfig;
use crate::cost::SyncCounter;
use crate::data::{BatchStream, ShardPlan, StreamCursor};
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelConfig};
use crate::optim::{LocalOptimizerSpec, LrSchedule, ServerOptSpec};
use crate::registry;
use crate::tensor::ParamVector;

/// Where the simulated workers' data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedMode {
    /// Worker `i` streams client `i` of the plan.
    PerWorkerShards,
    /// One stream over client 0; each global batch is split row-wise
    /// across the workers.
    SplitUnion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralizedConfig {
    pub n_workers: usize,
    pub global_batch: usize,
    pub total_steps: u64,
    pub schedule: LrSchedule,
    pub optimizer: LocalOptimizerSpec,
    /// Recreate the optimizer every this many steps; `0` never does.
    pub optimizer_reset_period: u64,
    pub feed: FeedMode,
    /// Evaluate every this many steps; `0` evaluates only at the end.
    pub eval_every: u64,
    pub record_trajectory: bool,
}

impl Default for CentralizedConfig {
    fn default() -> Self {
        Self {
            n_workers: 1,
            global_batch: 4,
            total_steps: 100,
            schedule: LrSchedule::default(),
            optimizer: LocalOptimizerSpec::default(),
            optimizer_reset_period: 0,
            feed: FeedMode::PerWorkerShards,
            eval_every: 0,
            record_trajectory: false,
        }
    }
}

impl CentralizedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 || self.global_batch == 0 {
            return Err(Error::Config("n_workers and global_batch must be at least 1".into()));
        }
        if self.global_batch % self.n_workers != 0 {
            return Err(Error::Config(format!(
                "global batch {} is not divisible by {} workers",
                self.global_batch, self.n_workers
            )));
        }
        self.schedule.validate()?;
        registry::local_optimizers().get(&self.optimizer.kind)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CentralizedRun {
    pub params: ParamVector,
    pub losses: Vec<f64>,
    /// `(step, perplexity)` pairs.
    pub evals: Vec<(u64, f64)>,
    /// Parameters after each step when recording is on.
    pub trajectory: Vec<ParamVector>,
    pub sync: SyncCounter,
    pub tokens: usize,
}

impl CentralizedRun {
    pub fn final_perplexity(&self) -> Option<f64> {
        self.evals.last().map(|&(_, p)| p)
    }
}

fn split_rows(batch: &Batch, parts: usize) -> Vec<Batch> {
    let rows = batch.batch / parts;
    let width = rows * batch.seq;
    (0..parts)
        .map(|i| Batch {
            batch: rows,
            seq: batch.seq,
            inputs: batch.inputs[i * width..(i + 1) * width].to_vec(),
            targets: batch.targets[i * width..(i + 1) * width].to_vec(),
        })
        .collect()
}

/// Synchronous data-parallel training: every step each worker computes a
/// gradient on its part of the global batch, the gradients are averaged in
/// worker order, and one shared optimizer update is applied.
pub fn run_centralized(
    model_cfg: &ModelConfig,
    config: &CentralizedConfig,
    plan: &ShardPlan,
    init: &ParamVector,
    seed: u64,
    eval: &[Batch],
) -> Result<CentralizedRun> {
    config.validate()?;
    let per_worker = config.global_batch / config.n_workers;
    let seq = model_cfg.seq_len;
    let mut streams = match config.feed {
        FeedMode::PerWorkerShards => {
            if plan.num_clients() < config.n_workers {
                return Err(Error::Config(format!(
                    "{} workers but the plan has {} shards",
                    config.n_workers,
                    plan.num_clients()
                )));
            }
            (0..config.n_workers)
                .map(|w| BatchStream::new(plan.clone(), w, per_worker, seq, seed, StreamCursor::default()))
                .collect::<Result<Vec<_>>>()?
        }
        FeedMode::SplitUnion => vec![BatchStream::new(
            plan.clone(),
            0,
            config.global_batch,
            seq,
            seed,
            StreamCursor::default(),
        )?],
    };

    let mut params = init.clone();
    let mut optimizer = registry::build_local_optimizer(&config.optimizer, init)?;
    let mut run = CentralizedRun {
        params: init.clone(),
        losses: Vec::with_capacity(config.total_steps as usize),
        evals: Vec::new(),
        trajectory: Vec::new(),
        sync: SyncCounter::default(),
        tokens: 0,
    };
    for step in 0..config.total_steps {
        if config.optimizer_reset_period > 0 && step > 0 && step % config.optimizer_reset_period == 0 {
            optimizer = registry::build_local_optimizer(&config.optimizer, init)?;
        }
        let batches = match config.feed {
            FeedMode::PerWorkerShards => streams.iter_mut().map(BatchStream::next_batch).collect(),
            FeedMode::SplitUnion => split_rows(&streams[0].next_batch(), config.n_workers),
        };
        let diverged = |worker: usize, reason: String| Error::Divergence {
            client: worker,
            round: 0,
            step,
            reason,
        };
        let mut losses = Vec::with_capacity(batches.len());
        let mut grads = Vec::with_capacity(batches.len());
        for (w, batch) in batches.iter().enumerate() {
            let (loss, g) = model::loss_and_grad(model_cfg, &params, batch).map_err(|e| match e {
                Error::Numeric(m) => diverged(w, m),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(w, format!("loss {loss}")));
            }
            run.tokens += batch.tokens();
            losses.push(loss);
            grads.push(g);
        }
        let grad = if grads.len() == 1 {
            grads.pop().expect("one worker")
        } else {
            ParamVector::mean(grads.iter())?
        };
        let lr = config.schedule.lr_at(step + 1);
        optimizer.step(&mut params, &grad, lr).map_err(|e| match e {
            Error::Numeric(m) => diverged(0, m),
            other => other,
        })?;
        run.sync.record_steps(1);
        run.sync.record_sync();
        run.losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
        if config.record_trajectory {
            run.trajectory.push(params.clone());
        }
        let done = step + 1;
        let last = done == config.total_steps;
        if !eval.is_empty() && (last || (config.eval_every > 0 && done % config.eval_every == 0)) {
            run.evals.push((done, model::eval_perplexity(model_cfg, &params, eval)?));
        }
    }
    run.params = params;
    Ok(run)
}

/// Nesterov outer momentum with server learning rate 0.1.
pub fn diloco_server_opt(momentum: f64) -> ServerOptSpec {
    ServerOptSpec {
        kind: "fedmom".into(),
        lr: 0.1,
        momentum,
        nesterov: true,
    }
}

/// The default federation with the DiLoCo outer optimizer (`μ = 0.9`).
pub fn diloco_config() -> FederationConfig {
    FederationConfig {
        server_opt: diloco_server_opt(0.9),
        ..FederationConfig::default()
    }
}
