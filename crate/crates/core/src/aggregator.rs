//! The server side of a federation: client sampling, pseudo-gradient
//! construction, the outer optimizer step, round metrics and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::client::{self, ClientResult, ClientStreamState, LocalHyper, PostProcessSpec, PostProcessor};
use crate::cost::{self, CostModelParams, Network, Topology, BYTES_PER_MB};
use crate::data::ShardPlan;
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelConfig};
use crate::optim::{LocalOptimizerSpec, LrSchedule, PseudoGradient, ServerOptSpec, ServerOptimizer};
use crate::registry;
use crate::seed::{self, Purpose};
use crate::tensor::{ParamVector, Tensor};

const VELOCITY_PREFIX: &str = "server/velocity/";

/// A client that fails to report back in a given round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropout {
    pub round: u64,
    pub client: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Population size `P`.
    pub population: usize,
    /// Clients sampled per round `K`; ignored when `participation` is set.
    pub clients_per_round: usize,
    /// Fraction of the population sampled per round.
    pub participation: Option<f64>,
    pub rounds: u64,
    pub local_steps: u64,
    pub local_batch: usize,
    pub topology: String,
    pub server_opt: ServerOptSpec,
    pub local_opt: LocalOptimizerSpec,
    pub schedule: LrSchedule,
    pub post_process: PostProcessSpec,
    /// Nodes per client; more than one trains each client as a
    /// sub-federation over an IID split of its shard.
    pub nodes_per_client: usize,
    pub dropouts: Vec<Dropout>,
    pub seed: u64,
    /// Worker threads for client execution. Results do not depend on it.
    pub threads: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            population: 4,
            clients_per_round: 4,
            participation: None,
            rounds: 10,
            local_steps: 64,
            local_batch: 4,
            topology: "rar".into(),
            server_opt: ServerOptSpec::default(),
            local_opt: LocalOptimizerSpec::default(),
            schedule: LrSchedule::default(),
            post_process: PostProcessSpec::default(),
            nodes_per_client: 1,
            dropouts: Vec::new(),
            seed: 0,
            threads: 1,
        }
    }
}

impl FederationConfig {
    /// Effective `K`.
    pub fn sampled_per_round(&self) -> usize {
        match self.participation {
            Some(f) => (f * self.population as f64).round() as usize,
            None => self.clients_per_round,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::Config("federation.population must be at least 1".into()));
        }
        if let Some(f) = self.participation {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("participation {f} must lie in (0, 1]")));
            }
        }
        let k = self.sampled_per_round();
        if k == 0 || k > self.population {
            return Err(Error::Config(format!(
                "{k} clients per round for a population of {}",
                self.population
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("federation.rounds must be at least 1".into()));
        }
        if self.local_batch == 0 || self.nodes_per_client == 0 || self.threads == 0 {
            return Err(Error::Config(
                "local_batch, nodes_per_client and threads must be at least 1".into(),
            ));
        }
        self.schedule.validate()?;
        registry::topologies().get(&self.topology)?;
        registry::local_optimizers().get(&self.local_opt.kind)?;
        registry::build_server_optimizer(&self.server_opt)?;
        registry::build_post_processor(&self.post_process)?;
        Ok(())
    }
}

/// `K` distinct clients drawn uniformly from `0..P`, ascending.
pub fn sample_clients(population: usize, k: usize, seed: u64, round: u64) -> Result<Vec<usize>> {
    if k > population {
        return Err(Error::Config(format!("cannot sample {k} of {population} clients")));
    }
    let mut rng = seed::rng(seed, Purpose::Sampling, &[round]);
    let mut ids = index::sample(&mut rng, population, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Mean of `θ_t − θ_k` and mean of `θ_k`, both summed in ascending client id.
pub fn compute_pseudo_gradient(
    global: &ParamVector,
    models: &[(usize, &ParamVector)],
) -> Result<PseudoGradient> {
    if models.is_empty() {
        return Err(Error::Usage("pseudo-gradient over zero clients".into()));
    }
    let mut ordered: Vec<(usize, &ParamVector)> = models.to_vec();
    ordered.sort_by_key(|(id, _)| *id);
    let deltas = ordered
        .iter()
        .map(|(_, m)| global.sub(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoGradient {
        delta: ParamVector::mean(deltas.iter())?,
        client_mean: ParamVector::mean(ordered.iter().map(|(_, m)| *m))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub sampled: Vec<usize>,
    pub survivors: Vec<usize>,
    pub mean_client_loss: f64,
    pub min_client_loss: f64,
    pub max_client_loss: f64,
    pub eval_ppl: f64,
    pub t_local_s: f64,
    pub t_comm_s: f64,
    pub t_agg_s: f64,
    pub t_cum_s: f64,
    pub bytes_round: u64,
    pub tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct FederationMeta {
    round: u64,
    t_cum_bits: u64,
    streams: Vec<ClientStreamState>,
}

/// Immutable view handed to client tasks.
struct ClientTask<'a> {
    global: &'a ParamVector,
    plan: &'a ShardPlan,
    hyper: &'a LocalHyper,
    streams: &'a [ClientStreamState],
    post: &'a dyn PostProcessor,
    batch: usize,
    nodes: usize,
    seed: u64,
    checkpoint_dir: Option<&'a Path>,
}

impl ClientTask<'_> {
    fn run(&self, client: usize, round: u64) -> Result<ClientResult> {
        let mut streams = client::client_streams(
            self.plan,
            client,
            self.nodes,
            self.batch,
            self.hyper.model.seq_len,
            self.seed,
            &self.streams[client],
        )?;
        let mut result = client::run_sub_federation(self.global, &mut streams, self.hyper, round, client)?;
        result.params = self.post.apply(self.global, result.params)?;
        if let Some(dir) = self.checkpoint_dir {
            let meta = serde_json::to_vec(&ClientStreamState {
                cursors: result.cursors.clone(),
            })
            .expect("cursor metadata serializes");
            checkpoint::write_checkpoint(
                &dir.join(format!("client-r{round:05}-c{client:04}.phck")),
                &Checkpoint {
                    round,
                    params: result.params.clone(),
                    meta,
                },
            )?;
        }
        Ok(result)
    }
}

/// Global state of a running federation.
pub struct Federation {
    config: FederationConfig,
    hyper: LocalHyper,
    cost: CostModelParams,
    network: Network,
    plan: ShardPlan,
    eval: Vec<Batch>,
    global: ParamVector,
    server: Box<dyn ServerOptimizer>,
    topology: Box<dyn Topology>,
    post: Box<dyn PostProcessor>,
    streams: Vec<ClientStreamState>,
    completed: u64,
    t_cum: f64,
    payload_mb: f64,
    pool: rayon::ThreadPool,
    client_checkpoint_dir: Option<PathBuf>,
}

impl Federation {
    pub fn new(
        config: FederationConfig,
        model: ModelConfig,
        cost: CostModelParams,
        network: Network,
        plan: ShardPlan,
        eval: Vec<Batch>,
        init: ParamVector,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        cost.validate()?;
        if plan.num_clients() != config.population {
            return Err(Error::Config(format!(
                "data plan has {} clients, federation expects {}",
                plan.num_clients(),
                config.population
            )));
        }
        if plan.block_len() != model.seq_len + 1 {
            return Err(Error::Config("data plan block length does not match model context".into()));
        }
        if eval.is_empty() {
            return Err(Error::Config("federation needs held-out evaluation batches".into()));
        }
        let template = model::init_model(&model, 0)?;
        template.check_compatible(&init)?;
        let payload_mb = if cost.payload_mb > 0.0 {
            cost.payload_mb
        } else {
            cost::payload_mb(init.total_len(), 8)
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            hyper: LocalHyper {
                model,
                local_steps: config.local_steps,
                schedule: config.schedule.clone(),
                optimizer: config.local_opt.clone(),
                throughput: cost.throughput,
            },
            server: registry::build_server_optimizer(&config.server_opt)?,
            topology: registry::build_topology(&config.topology)?,
            post: registry::build_post_processor(&config.post_process)?,
            streams: vec![ClientStreamState::default(); config.population],
            config,
            cost,
            network,
            plan,
            eval,
            global: init,
            completed: 0,
            t_cum: 0.0,
            payload_mb,
            pool,
            client_checkpoint_dir: None,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn completed_rounds(&self) -> u64 {
        self.completed
    }

    pub fn cumulative_time(&self) -> f64 {
        self.t_cum
    }

    pub fn payload_mb(&self) -> f64 {
        self.payload_mb
    }

    pub fn stream_state(&self, client: usize) -> Option<&ClientStreamState> {
        self.streams.get(client)
    }

    /// Also write each client's model and stream position after every round.
    pub fn set_client_checkpoint_dir(&mut self, dir: Option<PathBuf>) {
        self.client_checkpoint_dir = dir;
    }

    pub fn eval_perplexity(&self) -> Result<f64> {
        model::eval_perplexity(&self.hyper.model, &self.global, &self.eval)
    }

    /// Runs the next round. On error the federation state is unchanged.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.completed + 1;
        let sampled = sample_clients(
            self.config.population,
            self.config.sampled_per_round(),
            self.config.seed,
            round,
        )?;
        let survivors: Vec<usize> = sampled
            .iter()
            .copied()
            .filter(|&c| !self.config.dropouts.contains(&Dropout { round, client: c }))
            .collect();
        if survivors.len() < sampled.len() && !self.topology.tolerates_dropout() {
            return Err(Error::RoundFailure {
                round,
                reason: format!(
                    "{} of {} clients dropped and {} needs every participant",
                    sampled.len() - survivors.len(),
                    sampled.len(),
                    self.topology.name()
                ),
            });
        }
        if survivors.is_empty() {
            return Err(Error::RoundFailure {
                round,
                reason: "every sampled client dropped".into(),
            });
        }

        let task = ClientTask {
            global: &self.global,
            plan: &self.plan,
            hyper: &self.hyper,
            streams: &self.streams,
            post: self.post.as_ref(),
            batch: self.config.local_batch,
            nodes: self.config.nodes_per_client,
            seed: self.config.seed,
            checkpoint_dir: self.client_checkpoint_dir.as_deref(),
        };
        let outcomes: Vec<Result<ClientResult>> = self
            .pool
            .install(|| survivors.par_iter().map(|&c| task.run(c, round)).collect());
        let results = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let models: Vec<(usize, &ParamVector)> = results.iter().map(|r| (r.client, &r.params)).collect();
        let update = compute_pseudo_gradient(&self.global, &models)?;
        let next = self.server.step(&self.global, &update, round)?;
        if !next.is_finite() {
            return Err(Error::RoundFailure {
                round,
                reason: "server step produced non-finite parameters".into(),
            });
        }
        let eval_ppl = model::eval_perplexity(&self.hyper.model, &next, &self.eval)?;

        let k = survivors.len();
        let t_local = cost::local_time(self.config.local_steps, self.cost.throughput)?;
        let t_comm = self.topology.comm_time(k, self.payload_mb, &self.network)?;
        let t_agg = cost::agg_time(k, self.payload_mb, self.cost.server_flops)?;
        let bytes_round =
            (self.topology.megabytes_per_round(k, self.payload_mb) * BYTES_PER_MB).round() as u64;
        let losses: Vec<f64> = results.iter().map(ClientResult::mean_loss).collect();
        let mean_client_loss = losses.iter().sum::<f64>() / losses.len() as f64;

        for r in &results {
            self.streams[r.client].cursors = r.cursors.clone();
        }
        self.global = next;
        self.completed = round;
        self.t_cum += t_local + t_comm;
        Ok(RoundRecord {
            round,
            sampled,
            survivors,
            mean_client_loss,
            min_client_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
            max_client_loss: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            eval_ppl,
            t_local_s: t_local,
            t_comm_s: t_comm,
            t_agg_s: t_agg,
            t_cum_s: self.t_cum,
            bytes_round,
            tokens: results.iter().map(ClientResult::total_tokens).sum(),
        })
    }

    /// Writes the global model, server state and stream positions.
    pub fn checkpoint_global(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self.global.entries().to_vec();
        if let Some(v) = self.server.velocity() {
            entries.extend(
                v.entries()
                    .iter()
                    .map(|(n, t)| (format!("{VELOCITY_PREFIX}{n}"), t.clone())),
            );
        }
        let meta = FederationMeta {
            round: self.completed,
            t_cum_bits: self.t_cum.to_bits(),
            streams: self.streams.clone(),
        };
        checkpoint::write_checkpoint(
            path,
            &Checkpoint {
                round: self.completed,
                params: ParamVector::new(entries)?,
                meta: serde_json::to_vec(&meta).expect("metadata serializes"),
            },
        )
    }

    /// Restores a state written by [`Federation::checkpoint_global`] into a
    /// federation built from the same configuration.
    pub fn restore_global(&mut self, path: &Path) -> Result<()> {
        let ckpt = checkpoint::read_checkpoint(path)?;
        let meta: FederationMeta = serde_json::from_slice(&ckpt.meta)
            .map_err(|e| Error::integrity(path, format!("metadata: {e}")))?;
        let (mut params, mut velocity) = (Vec::new(), Vec::new());
        for (name, t) in ckpt.params.entries() {
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(rest) => velocity.push((rest.to_string(), t.clone())),
                None => params.push((name.clone(), t.clone())),
            }
        }
        let params = ParamVector::new(params)?;
        self.global.check_compatible(&params)?;
        if meta.streams.len() != self.config.population {
            return Err(Error::integrity(path, "stream state for a different population"));
        }
        let mut server = registry::build_server_optimizer(&self.config.server_opt)?;
        if !velocity.is_empty() {
            let v = ParamVector::new(velocity)?;
            params.check_compatible(&v)?;
            server.restore_velocity(v)?;
        }
        self.server = server;
        self.global = params;
        self.completed = meta.round;
        self.t_cum = f64::from_bits(meta.t_cum_bits);
        self.streams = meta.streams;
        Ok(())
    }
}
