//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use fedlm_core::aggregator::{Federation, FederationConfig};
use fedlm_core::baselines::{run_centralized, CentralizedConfig, FeedMode};
use fedlm_core::cost::{
    agg_time, local_time, total_wall_time, BandwidthMatrix, CostModelParams, Network, RoundCost,
    SyncCounter,
};
use fedlm_core::data::{eval_batches, generate_corpus, partition_iid, Style};
use fedlm_core::model::{self, Batch, ModelConfig};
use fedlm_core::optim::{LocalOptimizerSpec, LrSchedule};
use fedlm_core::{registry, ParamVector};
use fedlm_harness::experiment::{checkpoint_path, load_resolved, RunOptions, ROUNDS_FILE};
use fedlm_harness::metrics::{first_reaching, RoundRow};
use fedlm_harness::{run_experiment, ExperimentSpec, RunOutcome, SpecBuilder};

const REL_TOL_COST: f64 = 1e-12;
const TRAJECTORY_TOL: f64 = 1e-9;
const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_COORDS: usize = 240;
const CONVERGENCE_SLACK: f64 = 1.05;
const FED_MIN_DROP: f64 = 0.30;
const HETERO_MIN_DROP: f64 = 0.25;
/// Criterion 7 perplexities from the first green run: initial, federated,
/// centralized.
const DESK_FIXTURE: [f64; 3] = [64.5528479909, 3.9916952246, 3.8472542484];
const FIXTURE_REL_TOL: f64 = 1e-8;

fn verdict(n: u32, ok: bool, started: Instant, detail: String) {
    let status = if ok { "PASS" } else { "FAIL" };
    // Written to the handle directly so the line survives output capture.
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "criterion {n}: {status} ({:.1} s) {detail}",
        started.elapsed().as_secs_f64()
    )
    .unwrap();
    assert!(ok, "criterion {n} failed: {detail}");
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn uniform(b: f64) -> Network {
    Network::uniform(b).unwrap()
}

fn spec(sets: &[&str]) -> ExperimentSpec {
    let mut b = SpecBuilder::new();
    for s in sets {
        b.set(s).unwrap();
    }
    b.build().unwrap()
}

fn run(spec: &ExperimentSpec, dir: &Path) -> RunOutcome {
    run_experiment(spec, dir, RunOptions::default()).unwrap()
}

fn ppl_series(rows: &[RoundRow]) -> String {
    let v: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.eval_ppl)).collect();
    v.join(" ")
}

#[test]
fn criterion_01_cost_model_formulas() {
    let started = Instant::now();
    let ps = registry::build_topology("ps").unwrap();
    let ar = registry::build_topology("ar").unwrap();
    let rar = registry::build_topology("rar").unwrap();
    let mut fixtures: Vec<(&str, f64, f64)> = Vec::new();

    for (nu, t512, t64) in [
        (2.0, 256.0, 32.0),
        (0.147, 3482.993197278912, 435.374149659864),
        (0.839, 610.2502979737783, 76.28128724672229),
        (0.144, 3555.5555555555557, 444.44444444444446),
        (0.395, 1296.2025316455695, 162.02531645569618),
        (0.032, 16000.0, 2000.0),
        (0.12, 4266.666666666667, 533.3333333333334),
    ] {
        fixtures.push(("local 512", local_time(512, nu).unwrap(), t512));
        fixtures.push(("local 64", local_time(64, nu).unwrap(), t64));
    }
    let net = uniform(125.0);
    fixtures.push(("ps 16", ps.comm_time(16, 1000.0, &net).unwrap(), 128.0));
    fixtures.push(("ps 4", ps.comm_time(4, 13000.0, &uniform(1250.0)).unwrap(), 41.6));
    fixtures.push(("ar 16", ar.comm_time(16, 1000.0, &net).unwrap(), 120.0));
    fixtures.push(("ar 8", ar.comm_time(8, 500.0, &uniform(100.0)).unwrap(), 35.0));
    fixtures.push(("rar 16", rar.comm_time(16, 1000.0, &net).unwrap(), 15.0));
    fixtures.push(("rar 4", rar.comm_time(4, 1000.0, &net).unwrap(), 12.0));
    fixtures.push(("rar 2", rar.comm_time(2, 500.0, &uniform(100.0)).unwrap(), 5.0));
    fixtures.push(("agg 4", agg_time(4, 1000.0, 5e12).unwrap(), 3.3554432e-3));
    fixtures.push(("agg 16", agg_time(16, 250.0, 1e12).unwrap(), 0.016777216));

    let round = |topology, k, local_steps, throughput| RoundCost {
        topology,
        network: &net,
        clients: k,
        payload_mb: 1000.0,
        local_steps,
        throughput,
        server_flops: 5e12,
    };
    let a = total_wall_time(10, &round(rar.as_ref(), 4, 64, 2.0)).unwrap();
    fixtures.push(("round rar", a.t_round, 44.0));
    fixtures.push(("total rar", a.t_total, 440.0));
    let b = total_wall_time(3, &round(ps.as_ref(), 16, 512, 0.144)).unwrap();
    fixtures.push(("round ps", b.t_round, 3683.5555555555557));
    fixtures.push(("total ps", b.t_total, 11050.666666666668));

    // Three sites; the ring's slowest edge is the 40 MB/s wrap-around.
    let m = BandwidthMatrix::parse("s a b c\ns - 100 100 100\na 100 - 80 40\nb 100 80 - 90\nc 100 40 90 -\n")
        .unwrap();
    let mnet = Network::matrix(m, "s", None).unwrap();
    fixtures.push(("rar matrix", rar.comm_time(3, 120.0, &mnet).unwrap(), 4.0));
    fixtures.push(("ar matrix", ar.comm_time(3, 120.0, &mnet).unwrap(), 6.0));
    fixtures.push(("ps matrix", ps.comm_time(3, 120.0, &mnet).unwrap(), 3.6));

    let worst = fixtures
        .iter()
        .map(|&(_, got, want)| rel(got, want))
        .fold(0.0, f64::max);
    let bad: Vec<&str> = fixtures
        .iter()
        .filter(|&&(_, got, want)| rel(got, want) >= REL_TOL_COST)
        .map(|&(name, _, _)| name)
        .collect();

    let mut zero_k1 = true;
    for t in [&ps, &ar, &rar] {
        for network in [&net, &mnet] {
            zero_k1 &= t.comm_time(1, 1000.0, network).unwrap() == 0.0;
        }
    }
    verdict(
        1,
        fixtures.len() >= 20 && bad.is_empty() && zero_k1,
        started,
        format!("{} fixtures, worst rel err {worst:.2e}, K=1 zero: {zero_k1}, failing: {bad:?}", fixtures.len()),
    );
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_blocks: 1,
        d_model: 8,
        n_heads: 2,
        expansion_ratio: 2,
        vocab_size: 64,
        seq_len: 8,
    }
}

struct Fixture {
    model: ModelConfig,
    plan: fedlm_core::data::ShardPlan,
    eval: Vec<Batch>,
    init: ParamVector,
}

fn fixture(model: ModelConfig, clients: usize, tokens: usize) -> Fixture {
    let seq = model.seq_len;
    let corpus = generate_corpus(Style::Web, tokens, model.vocab_size, seq, 11).unwrap();
    let held = generate_corpus(Style::Web, 8 * (seq + 1), model.vocab_size, seq, 12).unwrap();
    Fixture {
        plan: partition_iid(corpus, clients, seq, 13).unwrap(),
        eval: eval_batches(&[held], 8, seq, 8).unwrap(),
        init: model::init_model(&model, 0).unwrap(),
        model,
    }
}

fn federation(f: &Fixture, cfg: FederationConfig) -> Federation {
    Federation::new(
        cfg,
        f.model.clone(),
        CostModelParams::default(),
        uniform(125.0),
        f.plan.clone(),
        f.eval.clone(),
        f.init.clone(),
    )
    .unwrap()
}

#[test]
fn criterion_02_communication_reduction() {
    let started = Instant::now();
    let f = fixture(tiny_model(), 1, 4000);
    let mut lines = Vec::new();
    let mut ok = true;
    for tau in [64u64, 512] {
        let total = 1024;
        let mut fed = federation(
            &f,
            FederationConfig {
                population: 1,
                clients_per_round: 1,
                rounds: total / tau,
                local_steps: tau,
                local_batch: 1,
                ..FederationConfig::default()
            },
        );
        let mut counter = SyncCounter::default();
        while fed.completed_rounds() < total / tau {
            fed.run_round().unwrap();
            counter.record_steps(tau);
            counter.record_sync();
        }
        let ddp = run_centralized(
            &f.model,
            &CentralizedConfig {
                global_batch: 1,
                total_steps: total,
                ..CentralizedConfig::default()
            },
            &f.plan,
            &f.init,
            0,
            &[],
        )
        .unwrap()
        .sync;
        ok &= counter == SyncCounter::federated(total, tau).unwrap();
        ok &= ddp.steps == counter.steps && ddp.events == tau * counter.events;
        lines.push(format!("tau={tau}: ddp {} events vs federated {}", ddp.events, counter.events));
    }
    verdict(2, ok, started, lines.join("; "));
}

#[test]
fn criterion_03_fedavg_matches_union_batch_sgd() {
    let started = Instant::now();
    let f = fixture(ModelConfig::default(), 4, 40_000);
    let schedule = LrSchedule {
        max_lr: 0.05,
        warmup_steps: 5,
        decay_steps: 50,
        alpha: 0.1,
    };
    let mut fed = federation(
        &f,
        FederationConfig {
            population: 4,
            clients_per_round: 4,
            rounds: 50,
            local_steps: 1,
            local_batch: 2,
            topology: "ps".into(),
            local_opt: LocalOptimizerSpec::plain_sgd(),
            schedule: schedule.clone(),
            seed: 3,
            ..FederationConfig::default()
        },
    );
    let central = run_centralized(
        &f.model,
        &CentralizedConfig {
            n_workers: 4,
            global_batch: 8,
            total_steps: 50,
            schedule,
            optimizer: LocalOptimizerSpec::plain_sgd(),
            feed: FeedMode::PerWorkerShards,
            record_trajectory: true,
            ..CentralizedConfig::default()
        },
        &f.plan,
        &f.init,
        3,
        &[],
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for theta in &central.trajectory {
        fed.run_round().unwrap();
        worst = worst.max(fed.global().max_abs_diff(theta).unwrap());
    }
    let moved = central.params.max_abs_diff(&f.init).unwrap();
    verdict(
        3,
        central.trajectory.len() == 50 && worst <= TRAJECTORY_TOL && moved > 1e-3,
        started,
        format!("max abs diff over 50 steps {worst:.3e}, parameters moved {moved:.3e}"),
    );
}

#[test]
fn criterion_04_single_client_equals_centralized() {
    let started = Instant::now();
    let f = fixture(ModelConfig::default(), 1, 30_000);
    let schedule = LrSchedule {
        max_lr: 3e-3,
        warmup_steps: 10,
        decay_steps: 200,
        alpha: 0.1,
    };
    let mut fed = federation(
        &f,
        FederationConfig {
            population: 1,
            clients_per_round: 1,
            rounds: 10,
            local_steps: 20,
            local_batch: 4,
            schedule: schedule.clone(),
            seed: 5,
            ..FederationConfig::default()
        },
    );
    for _ in 0..10 {
        fed.run_round().unwrap();
    }
    let central = run_centralized(
        &f.model,
        &CentralizedConfig {
            n_workers: 1,
            global_batch: 4,
            total_steps: 200,
            schedule,
            optimizer_reset_period: 20,
            ..CentralizedConfig::default()
        },
        &f.plan,
        &f.init,
        5,
        &[],
    )
    .unwrap();
    let identical = fed.global().bit_eq(&central.params);
    verdict(
        4,
        identical,
        started,
        format!(
            "bit-identical: {identical}, max abs diff {:.3e}",
            fed.global().max_abs_diff(&central.params).unwrap()
        ),
    );
}

#[test]
fn criterion_05_gradient_finite_differences() {
    let started = Instant::now();
    let cfg = ModelConfig {
        seq_len: 8,
        ..ModelConfig::default()
    };
    let f = fixture(cfg.clone(), 1, 2000);
    let params = model::init_model(&cfg, 9).unwrap();
    let batch = f.eval[0].clone();
    let (_, grad) = model::loss_and_grad(&cfg, &params, &batch).unwrap();
    let n = params.total_len();
    let stride = n / FD_COORDS;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = params.clone();
    // Evenly strided coordinates, offset so every entry kind is visited.
    for i in 0..FD_COORDS {
        let idx = (i * stride + i % 7) % n;
        let x = params.flat_get(idx).unwrap();
        probe.flat_set(idx, x + FD_EPS).unwrap();
        let (up, _) = model::forward_loss(&cfg, &probe, &batch).unwrap();
        probe.flat_set(idx, x - FD_EPS).unwrap();
        let (down, _) = model::forward_loss(&cfg, &probe, &batch).unwrap();
        probe.flat_set(idx, x).unwrap();
        let fd = (up - down) / (2.0 * FD_EPS);
        let an = grad.flat_get(idx).unwrap();
        let scale = fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max((fd - an).abs() / scale);
        checked += 1;
    }
    verdict(
        5,
        checked >= 200 && worst < FD_REL_TOL,
        started,
        format!("{checked} coordinates of {n}, max rel err {worst:.3e}"),
    );
}

#[test]
fn criterion_06_topology_changes_time_not_math() {
    let started = Instant::now();
    let f = fixture(ModelConfig::default(), 4, 20_000);
    let mut finals = Vec::new();
    let mut comm = Vec::new();
    for topology in ["ps", "ar", "rar"] {
        let mut fed = federation(
            &f,
            FederationConfig {
                population: 4,
                clients_per_round: 4,
                rounds: 2,
                local_steps: 4,
                local_batch: 2,
                topology: topology.into(),
                ..FederationConfig::default()
            },
        );
        let mut record = None;
        for _ in 0..2 {
            record = Some(fed.run_round().unwrap());
        }
        comm.push(record.unwrap().t_comm_s);
        finals.push(fed.global().clone());
    }
    let same = finals[1].bit_eq(&finals[0]) && finals[2].bit_eq(&finals[0]);
    let distinct = comm[0] != comm[1] && comm[1] != comm[2] && comm[0] != comm[2];

    let ar = registry::build_topology("ar").unwrap();
    let rar = registry::build_topology("rar").unwrap();
    let net = uniform(125.0);
    let mut ordered = true;
    for k in [2, 4, 8, 16] {
        let s = 1000.0;
        ordered &= rar.comm_time(k, s, &net).unwrap() <= ar.comm_time(k, s, &net).unwrap();
    }
    verdict(
        6,
        same && distinct && ordered,
        started,
        format!("bit-identical params: {same}, T_C ps/ar/rar = {comm:?}, rar <= ar: {ordered}"),
    );
}

/// Model and data shared by the desk-scale convergence criteria.
const DESK: [&str; 10] = [
    "model.n_blocks=2",
    "model.d_model=32",
    "model.n_heads=2",
    "model.expansion_ratio=4",
    "model.vocab_size=64",
    "model.seq_len=16",
    "data.eval_sequences=64",
    "data.eval_batch=32",
    "federation.topology=rar",
    "federation.threads=1",
];

fn desk(extra: &[&str]) -> ExperimentSpec {
    let sets: Vec<&str> = DESK.iter().chain(extra).copied().collect();
    spec(&sets)
}

#[test]
fn criterion_07_federated_tracks_centralized() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let shared = [
        "data.policy=iid",
        "data.styles=[\"web\"]",
        "data.tokens_per_client=32000",
        "federation.population=16",
        "federation.seed=7",
        "federation.local_opt.kind=adamw",
    ];
    let fed_spec = desk(&[
        &shared[..],
        &[
            "federation.clients_per_round=16",
            "federation.rounds=20",
            "federation.local_steps=64",
            "federation.local_batch=2",
            "federation.schedule.max_lr=0.01",
            "federation.schedule.warmup_steps=16",
            "federation.schedule.decay_steps=1280",
        ],
    ]
    .concat());
    let central_spec = desk(&[
        &shared[..],
        &[
            "experiment.mode=centralized",
            "centralized.n_workers=16",
            "centralized.global_batch=32",
            "centralized.total_steps=1280",
            "centralized.eval_every=64",
            "centralized.schedule.max_lr=0.01",
            "centralized.schedule.warmup_steps=16",
            "centralized.schedule.decay_steps=1280",
        ],
    ]
    .concat());
    let fed = run(&fed_spec, &dir.path().join("fed"));
    let central = run(&central_spec, &dir.path().join("central"));
    let fs = fed.summary.unwrap();
    let cs = central.summary.unwrap();
    let tokens_equal = fed_spec.federation.rounds
        * fed_spec.federation.local_steps
        * (fed_spec.federation.local_batch * fed_spec.federation.population) as u64
        == central_spec.centralized.total_steps * central_spec.centralized.global_batch as u64;
    let regression = [fs.initial_ppl, fs.final_ppl, cs.final_ppl]
        .iter()
        .zip(DESK_FIXTURE)
        .all(|(&got, want)| rel(got, want) < FIXTURE_REL_TOL);
    let ok = tokens_equal
        && regression
        && fs.final_ppl <= CONVERGENCE_SLACK * cs.final_ppl
        && fs.final_ppl <= (1.0 - FED_MIN_DROP) * fs.initial_ppl
        && cs.final_ppl <= (1.0 - FED_MIN_DROP) * cs.initial_ppl;
    verdict(
        7,
        ok,
        started,
        format!(
            "initial {:.10}, federated {:.10} [{}], centralized {:.10} [{}], equal tokens: {tokens_equal}, matches fixture: {regression}",
            fs.initial_ppl,
            fs.final_ppl,
            ppl_series(&fed.rows),
            cs.final_ppl,
            ppl_series(&central.rows)
        ),
    );
}

#[test]
fn criterion_08_more_clients_reach_the_target_no_later() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let target = 4.5;
    let mut times = Vec::new();
    let mut series = Vec::new();
    for k in [1, 2, 4] {
        let clients = format!("federation.clients_per_round={k}");
        let spec = desk(&[
            "data.tokens_per_client=6000",
            "federation.population=4",
            &clients,
            "federation.rounds=10",
            "federation.local_steps=64",
            "federation.local_batch=1",
            "federation.local_opt.kind=sgd",
            "federation.local_opt.clip_norm=0.0",
            "federation.local_opt.weight_decay=0.0",
            "federation.schedule.max_lr=0.5",
            "federation.schedule.warmup_steps=0",
            "federation.schedule.decay_steps=640",
            "federation.seed=2",
        ]);
        let out = run(&spec, &dir.path().join(format!("k{k}")));
        times.push(first_reaching(&out.rows, target).map(|r| r.t_cum_s));
        series.push(format!("K={k}: {}", ppl_series(&out.rows)));
    }
    let reached = times.iter().all(Option::is_some);
    let t: Vec<f64> = times.iter().map(|t| t.unwrap_or(f64::INFINITY)).collect();
    verdict(
        8,
        reached && t[1] <= t[0] && t[2] <= t[1],
        started,
        format!("target {target}: times {t:?}; {}", series.join("; ")),
    );
}

/// Largest increase in evaluation perplexity from one round to the next.
fn fluctuation(rows: &[RoundRow]) -> f64 {
    rows.windows(2)
        .map(|w| w[1].eval_ppl - w[0].eval_ppl)
        .fold(0.0, f64::max)
}

#[test]
fn criterion_09_heterogeneous_clients() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "experiment.preset=hetero-4",
        "data.tokens_per_client=8000",
        "federation.rounds=8",
        "federation.local_steps=64",
        "federation.local_batch=4",
        "federation.schedule.max_lr=0.01",
        "federation.schedule.warmup_steps=16",
        "federation.schedule.decay_steps=512",
        "federation.seed=4",
    ];
    let full = run(&desk(&base), &dir.path().join("full"));
    let partial_spec = desk(&[&base[..], &["federation.participation=0.25"]].concat());
    let partial = run(&partial_spec, &dir.path().join("partial"));
    let fs = full.summary.as_ref().unwrap();
    let converged = fs.final_ppl <= (1.0 - HETERO_MIN_DROP) * fs.initial_ppl;
    let completed = partial.rows.len() == 8 && partial.rows.iter().all(|r| r.sampled().len() == 1);
    let (ff, pf) = (fluctuation(&full.rows), fluctuation(&partial.rows));
    verdict(
        9,
        converged && completed && pf > ff,
        started,
        format!(
            "full {:.3} -> {:.3}, fluctuation full {ff:.4} vs 25% {pf:.4}; full [{}]; partial [{}]",
            fs.initial_ppl,
            fs.final_ppl,
            ppl_series(&full.rows),
            ppl_series(&partial.rows)
        ),
    );
}

#[test]
fn criterion_10_rerun_and_resume_are_bit_identical() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let original = desk(&[
        "experiment.preset=diloco",
        "model.n_blocks=1",
        "data.tokens_per_client=3000",
        "federation.population=4",
        "federation.participation=0.5",
        "federation.rounds=5",
        "federation.local_steps=8",
        "federation.local_batch=2",
        "federation.seed=21",
        "client.checkpoints=true",
    ]);
    let a = dir.path().join("a");
    let first = run(&original, &a);

    let resolved = load_resolved(&a).unwrap();
    let b = dir.path().join("b");
    let rerun = run(&resolved, &b);
    let csv_same = std::fs::read(a.join(ROUNDS_FILE)).unwrap() == std::fs::read(b.join(ROUNDS_FILE)).unwrap();
    let ckpt_same = std::fs::read(checkpoint_path(&a)).unwrap() == std::fs::read(checkpoint_path(&b)).unwrap();

    let c = dir.path().join("c");
    let killed = run_experiment(
        &resolved,
        &c,
        RunOptions {
            resume: false,
            stop_after: Some(3),
        },
    )
    .unwrap();
    let resumed = run_experiment(
        &resolved,
        &c,
        RunOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    let params_same = resumed.params.to_le_bytes() == first.params.to_le_bytes();
    let resumed_csv_same = std::fs::read(a.join(ROUNDS_FILE)).unwrap() == std::fs::read(c.join(ROUNDS_FILE)).unwrap();
    verdict(
        10,
        csv_same && ckpt_same && rerun.params.bit_eq(&first.params) && killed.summary.is_none() && params_same && resumed_csv_same,
        started,
        format!(
            "rerun csv {csv_same}, rerun checkpoint {ckpt_same}, resume params {params_same}, resume csv {resumed_csv_same}"
        ),
    );
}
