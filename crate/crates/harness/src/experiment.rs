//! Running one experiment into a run directory.
//!
//! A run directory holds `config.resolved`, `rounds.csv`, `summary.json` and
//! `checkpoints/global.phck` (plus per-client checkpoints when enabled).

use std::path::{Path, PathBuf};
use std::time::Instant;

use fedlm_core::aggregator::Federation;
use fedlm_core::baselines::run_centralized;
use fedlm_core::checkpoint::{self, Checkpoint};
use fedlm_core::client::{select_strategy, Strategy};
use fedlm_core::cost::{self, BandwidthMatrix, Network, BYTES_PER_MB};
use fedlm_core::data::{
    eval_batches, generate_corpus, partition_by_source, partition_iid, read_corpus, Corpus,
    PartitionPolicy, ShardPlan,
};
use fedlm_core::model::{self, Batch};
use fedlm_core::registry;
use fedlm_core::seed::{self, Purpose};
use fedlm_core::ParamVector;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentSpec, Mode, SpecBuilder};
use crate::error::{HarnessError, Result};
use crate::metrics::{join_ids, RoundRow, RoundsWriter};

pub const CONFIG_FILE: &str = "config.resolved";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const GLOBAL_CHECKPOINT: &str = "global.phck";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from the directory's last global checkpoint.
    pub resume: bool,
    /// Return once this many rounds are complete, leaving the directory as
    /// an interrupted run would.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mode: Mode,
    pub completed_rounds: u64,
    pub initial_ppl: f64,
    pub final_ppl: f64,
    pub t_cum_s: f64,
    pub payload_mb: f64,
    pub param_count: usize,
    pub strategy: Option<Strategy>,
    /// Host time spent on the run; informational only.
    pub real_elapsed_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<RoundRow>,
    pub params: ParamVector,
    /// `None` when the run stopped early.
    pub summary: Option<Summary>,
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(GLOBAL_CHECKPOINT)
}

/// Reads a run directory's `config.resolved`.
pub fn load_resolved(dir: &Path) -> Result<ExperimentSpec> {
    SpecBuilder::from_file(&dir.join(CONFIG_FILE))?.build()
}

/// Training plan and held-out batches for a spec.
pub struct DataBundle {
    pub plan: ShardPlan,
    pub eval: Vec<Batch>,
}

/// Tokens split off the end of each source as held-out text.
fn holdout_tokens(spec: &ExperimentSpec) -> usize {
    let per_source = spec.data.eval_sequences.div_ceil(spec.data.styles.len());
    per_source * (spec.model.seq_len + 1)
}

fn split_holdout(corpus: Corpus, holdout: usize) -> Result<(Corpus, Corpus)> {
    if corpus.len() <= holdout {
        return Err(HarnessError::Config(format!(
            "{} corpus of {} tokens cannot spare {holdout} held-out tokens",
            corpus.source_label,
            corpus.len()
        )));
    }
    let cut = corpus.len() - holdout;
    let train = Corpus::new(corpus.tokens[..cut].to_vec(), corpus.source_label, corpus.vocab_size)?;
    let eval = Corpus::new(corpus.tokens[cut..].to_vec(), corpus.source_label, corpus.vocab_size)?;
    Ok((train, eval))
}

pub fn build_data(spec: &ExperimentSpec) -> Result<DataBundle> {
    let d = &spec.data;
    let clients = spec.plan_clients()?;
    let per_source_clients = match d.policy {
        PartitionPolicy::Iid => clients,
        PartitionPolicy::BySource => d.clients_per_source,
    };
    let holdout = holdout_tokens(spec);
    let mut train = Vec::with_capacity(d.styles.len());
    let mut held = Vec::with_capacity(d.styles.len());
    for (i, &style) in d.styles.iter().enumerate() {
        let corpus = match d.corpus_files.get(i) {
            Some(path) => read_corpus(path, style)?,
            None => generate_corpus(
                style,
                d.tokens_per_client * per_source_clients + holdout,
                spec.model.vocab_size,
                spec.model.seq_len,
                d.corpus_seed,
            )?,
        };
        if corpus.vocab_size != spec.model.vocab_size {
            return Err(HarnessError::Config(format!(
                "{style} corpus has vocabulary {} but the model expects {}",
                corpus.vocab_size, spec.model.vocab_size
            )));
        }
        let (t, e) = split_holdout(corpus, holdout)?;
        train.push(t);
        held.push(e);
    }
    let seq = spec.model.seq_len;
    let plan = match d.policy {
        PartitionPolicy::Iid => partition_iid(
            train.pop().expect("one source"),
            clients,
            seq,
            seed::derive(d.corpus_seed, Purpose::Partition, &[]),
        )?,
        PartitionPolicy::BySource => partition_by_source(train, d.clients_per_source, seq)?,
    };
    let eval = eval_batches(&held, d.eval_sequences, seq, d.eval_batch)?;
    Ok(DataBundle { plan, eval })
}

pub fn build_network(spec: &ExperimentSpec) -> Result<Network> {
    match &spec.network.matrix_file {
        None => Ok(Network::uniform(spec.cost.bandwidth_mbps)?),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            let matrix = BandwidthMatrix::parse(&text).map_err(|e| HarnessError::parse(path, e))?;
            let server = spec.network.server.as_deref().unwrap_or_default();
            Ok(Network::matrix(matrix, server, spec.network.ring.as_deref())?)
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

/// Validates, builds everything that can fail on configuration, then runs.
pub fn run_experiment(spec: &ExperimentSpec, dir: &Path, opts: RunOptions) -> Result<RunOutcome> {
    spec.validate()?;
    let data = build_data(spec)?;
    let network = build_network(spec)?;
    let strategy = spec
        .client
        .hardware
        .as_ref()
        .map(|hw| select_strategy(hw, &spec.model))
        .transpose()?;
    let init = model::init_model(&spec.model, spec.federation.seed)?;

    if opts.resume {
        let on_disk = load_resolved(dir)?;
        if &on_disk != spec {
            return Err(HarnessError::Config(format!(
                "{} does not match the configuration being resumed",
                dir.join(CONFIG_FILE).display()
            )));
        }
    } else {
        create_dir(&dir.join(CHECKPOINT_DIR))?;
        write_file(&dir.join(CONFIG_FILE), spec.to_toml().as_bytes())?;
    }
    let started = Instant::now();
    let ctx = Context {
        spec,
        dir,
        opts,
        strategy,
        started,
    };
    match spec.experiment.mode {
        Mode::Federated => ctx.federated(data, network, init),
        Mode::Centralized => ctx.centralized(data, network, init),
    }
}

struct Context<'a> {
    spec: &'a ExperimentSpec,
    dir: &'a Path,
    opts: RunOptions,
    strategy: Option<Strategy>,
    started: Instant,
}

impl Context<'_> {
    fn summary(&self, rows: &[RoundRow], initial_ppl: f64, payload_mb: f64, params: &ParamVector) -> Result<Summary> {
        let last = rows.last();
        let summary = Summary {
            name: self.spec.experiment.name.clone(),
            mode: self.spec.experiment.mode,
            completed_rounds: rows.len() as u64,
            initial_ppl,
            final_ppl: last.map_or(initial_ppl, |r| r.eval_ppl),
            t_cum_s: last.map_or(0.0, |r| r.t_cum_s),
            payload_mb,
            param_count: params.total_len(),
            strategy: self.strategy.clone(),
            real_elapsed_s: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
        write_file(&self.dir.join(SUMMARY_FILE), &json)?;
        Ok(summary)
    }

    fn federated(&self, data: DataBundle, network: Network, init: ParamVector) -> Result<RunOutcome> {
        let spec = self.spec;
        let initial_ppl = model::eval_perplexity(&spec.model, &init, &data.eval)?;
        let mut fed = Federation::new(
            spec.federation.clone(),
            spec.model.clone(),
            spec.cost.clone(),
            network,
            data.plan,
            data.eval,
            init,
        )?;
        if spec.client.checkpoints {
            let dir = self.dir.join(CHECKPOINT_DIR).join("clients");
            create_dir(&dir)?;
            fed.set_client_checkpoint_dir(Some(dir));
        }
        let ckpt = checkpoint_path(self.dir);
        let csv = self.dir.join(ROUNDS_FILE);
        let mut writer = if self.opts.resume {
            fed.restore_global(&ckpt)?;
            RoundsWriter::resume(&csv, fed.completed_rounds())?
        } else {
            RoundsWriter::create(&csv)?
        };
        let mut rows = crate::metrics::read_rounds(&csv)?;
        let total = spec.federation.rounds;
        let every = spec.run.checkpoint_every;
        while fed.completed_rounds() < total {
            if self.opts.stop_after.is_some_and(|s| fed.completed_rounds() >= s) {
                return Ok(RunOutcome {
                    dir: self.dir.to_path_buf(),
                    rows,
                    params: fed.global().clone(),
                    summary: None,
                });
            }
            let record = fed.run_round()?;
            let row = RoundRow::from(&record);
            writer.append(&row)?;
            rows.push(row);
            if record.round == total || (every > 0 && record.round % every == 0) {
                fed.checkpoint_global(&ckpt)?;
            }
        }
        let summary = self.summary(&rows, initial_ppl, fed.payload_mb(), fed.global())?;
        Ok(RunOutcome {
            dir: self.dir.to_path_buf(),
            rows,
            params: fed.global().clone(),
            summary: Some(summary),
        })
    }

    /// One CSV row per evaluation interval, timed as a data-parallel job
    /// that ring-reduces the full model after every step.
    fn centralized(&self, data: DataBundle, network: Network, init: ParamVector) -> Result<RunOutcome> {
        let spec = self.spec;
        if self.opts.resume || self.opts.stop_after.is_some() {
            return Err(HarnessError::Config(
                "centralized runs cannot be interrupted or resumed".into(),
            ));
        }
        let c = &spec.centralized;
        let initial_ppl = model::eval_perplexity(&spec.model, &init, &data.eval)?;
        let run = run_centralized(&spec.model, c, &data.plan, &init, spec.federation.seed, &data.eval)?;
        let payload = if spec.cost.payload_mb > 0.0 {
            spec.cost.payload_mb
        } else {
            cost::payload_mb(init.total_len(), 8)
        };
        let ring = registry::build_topology("rar")?;
        let comm_step = ring.comm_time(c.n_workers, payload, &network)?;
        let mb_step = ring.megabytes_per_round(c.n_workers, payload);
        let workers: Vec<usize> = (0..c.n_workers).collect();
        let mut writer = RoundsWriter::create(&self.dir.join(ROUNDS_FILE))?;
        let mut rows = Vec::with_capacity(run.evals.len());
        let (mut prev, mut t_cum) = (0u64, 0.0);
        for (i, &(step, ppl)) in run.evals.iter().enumerate() {
            let interval = step - prev;
            let losses = &run.losses[prev as usize..step as usize];
            let t_local = cost::local_time(interval, spec.cost.throughput)?;
            let t_comm = interval as f64 * comm_step;
            t_cum += t_local + t_comm;
            let row = RoundRow {
                round: i as u64 + 1,
                sampled_ids: join_ids(&workers),
                mean_client_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                eval_ppl: ppl,
                t_local_s: t_local,
                t_comm_s: t_comm,
                t_agg_s: 0.0,
                t_cum_s: t_cum,
                bytes_round: (interval as f64 * mb_step * BYTES_PER_MB).round() as u64,
            };
            writer.append(&row)?;
            rows.push(row);
            prev = step;
        }
        checkpoint::write_checkpoint(
            &checkpoint_path(self.dir),
            &Checkpoint {
                round: c.total_steps,
                params: run.params.clone(),
                meta: Vec::new(),
            },
        )?;
        let summary = self.summary(&rows, initial_ppl, payload, &run.params)?;
        Ok(RunOutcome {
            dir: self.dir.to_path_buf(),
            rows,
            params: run.params,
            summary: Some(summary),
        })
    }
}

/// Output directory for a run: the explicit path, otherwise
/// `<root>/<experiment name>` where `root` comes from [`OUTPUT_ROOT_ENV`].
pub fn output_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => output_root().join(name),
    }
}

pub const OUTPUT_ROOT_ENV: &str = "FEDLM_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
