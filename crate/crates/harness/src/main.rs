use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedlm_harness::experiment::{self, load_resolved, output_dir, output_root, RunOptions};
use fedlm_harness::{inspect, metrics, sweep, Result, SpecBuilder};

/// Desk-scale federated language-model pre-training simulator.
#[derive(Parser)]
#[command(name = "fedlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set federation.rounds=20`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl SpecArgs {
    fn builder(&self) -> Result<SpecBuilder> {
        let mut b = match &self.config {
            Some(p) => SpecBuilder::from_file(p)?,
            None => SpecBuilder::new(),
        };
        for s in &self.sets {
            b.set(s)?;
        }
        Ok(b)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        /// Run directory; defaults to `$FEDLM_OUTPUT_ROOT/<experiment.name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the run in `--out` from its last checkpoint, using its
        /// `config.resolved`.
        #[arg(long, requires = "out", conflicts_with_all = ["config", "sets"])]
        resume: bool,
        /// Stop after this many completed rounds.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run one experiment per value of a configuration key.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        /// Key to vary, e.g. `federation.clients_per_round`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated seconds until a run first reaches a perplexity.
    TimeToTarget {
        /// A `rounds.csv` file or a run directory.
        path: PathBuf,
        #[arg(long)]
        target: f64,
    },
    /// Print the header and entry table of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            spec,
            out,
            resume,
            stop_after,
        } => {
            let opts = RunOptions { resume, stop_after };
            let (spec, dir) = if resume {
                let dir = out.expect("clap enforces --out");
                (load_resolved(&dir)?, dir)
            } else {
                let spec = spec.builder()?.build()?;
                let dir = output_dir(out.as_deref(), &spec.experiment.name);
                (spec, dir)
            };
            let outcome = experiment::run_experiment(&spec, &dir, opts)?;
            report(&dir, &outcome);
        }
        Command::Sweep {
            spec,
            param,
            values,
            out,
        } => {
            let base = spec.builder()?;
            let name = base.build()?.experiment.name;
            let root = out.unwrap_or_else(|| output_root().join(name));
            for outcome in sweep::sweep(&base, &param, &values, &root)? {
                report(&outcome.dir, &outcome);
            }
        }
        Command::TimeToTarget { path, target } => {
            let csv = if path.is_dir() {
                path.join(experiment::ROUNDS_FILE)
            } else {
                path
            };
            match metrics::time_to_target(&csv, target)? {
                Some(t) => println!("{t}"),
                None => println!("none"),
            }
        }
        Command::InspectCheckpoint { path } => print!("{}", inspect::inspect_checkpoint(&path)?),
    }
    Ok(())
}

fn report(dir: &Path, outcome: &experiment::RunOutcome) {
    match &outcome.summary {
        Some(s) => println!(
            "{}: {} rounds, ppl {:.3} -> {:.3}, simulated {:.1} s",
            dir.display(),
            s.completed_rounds,
            s.initial_ppl,
            s.final_ppl,
            s.t_cum_s
        ),
        None => println!("{}: stopped after {} rounds", dir.display(), outcome.rows.len()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
