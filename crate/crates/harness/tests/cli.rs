use std::path::Path;
use std::process::{Command, Output};

use fedlm_harness::experiment::{build_data, CHECKPOINT_DIR, GLOBAL_CHECKPOINT, ROUNDS_FILE};
use fedlm_harness::metrics::{read_rounds, COLUMNS};
use fedlm_harness::SpecBuilder;

const TINY: [&str; 9] = [
    "model.n_blocks=1",
    "model.d_model=16",
    "model.seq_len=8",
    "data.tokens_per_client=1500",
    "data.eval_sequences=8",
    "data.eval_batch=8",
    "federation.rounds=2",
    "federation.local_steps=3",
    "federation.local_batch=2",
];

fn fedlm(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlm"))
        .args(args)
        .env("FEDLM_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

/// Ten rounds, perplexity falling from 100 by 10 per round, 30 s per round.
fn fixture_csv(dir: &Path) -> std::path::PathBuf {
    let mut text = COLUMNS.join(",");
    text.push('\n');
    for r in 1..=10u32 {
        let ppl = 100.0 - 10.0 * f64::from(r - 1);
        text.push_str(&format!(
            "{r},0;1,{},{ppl},28,2,0.001,{},1048576\n",
            ppl.ln(),
            30 * r
        ));
    }
    let path = dir.join("rounds.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn time_to_target_on_a_hand_built_series() {
    let dir = tempfile::tempdir().unwrap();
    let csv = fixture_csv(dir.path());
    let csv = csv.to_str().unwrap();
    // Round 7 is the first at or below 40.
    let o = fedlm(&["time-to-target", csv, "--target", "40"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o), "210");
    let o = fedlm(&["time-to-target", csv, "--target", "45"], dir.path());
    assert_eq!(stdout(&o), "210");
    let o = fedlm(&["time-to-target", csv, "--target", "5"], dir.path());
    assert_eq!(stdout(&o), "none");
    let o = fedlm(&["time-to-target", csv, "--target", "1000"], dir.path());
    assert_eq!(stdout(&o), "30");

    assert_eq!(fedlm_harness::time_to_target(Path::new(csv), 40.0).unwrap(), Some(210.0));
    assert_eq!(fedlm_harness::time_to_target(Path::new(csv), 5.0).unwrap(), None);
}

#[test]
fn malformed_csv_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, format!("{}\n1,0,x,y,1,1,1,1,1\n", COLUMNS.join(","))).unwrap();
    let o = fedlm(&["time-to-target", bad.to_str().unwrap(), "--target", "3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot parse"));
    std::fs::write(&bad, "round,eval_ppl\n1,3\n").unwrap();
    assert!(fedlm_harness::time_to_target(&bad, 3.0).is_err());
}

#[test]
fn run_inspect_and_rerun_through_the_cli() {
    let root = tempfile::tempdir().unwrap();
    let args = with_sets(vec!["run"], &TINY);
    let args = with_sets(args, &["experiment.name=cli"]);
    let o = fedlm(&args, root.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = root.path().join("cli");
    let first = std::fs::read(dir.join(ROUNDS_FILE)).unwrap();
    assert_eq!(read_rounds(&dir.join(ROUNDS_FILE)).unwrap().len(), 2);

    let ckpt = dir.join(CHECKPOINT_DIR).join(GLOBAL_CHECKPOINT);
    let o = fedlm(&["inspect-checkpoint", ckpt.to_str().unwrap()], root.path());
    assert!(o.status.success());
    let report = stdout(&o);
    assert!(report.starts_with("round        2"), "{report}");
    assert!(report.contains("head.weight"), "{report}");

    let resolved = dir.join("config.resolved");
    let again = root.path().join("again");
    let o = fedlm(
        &["run", "--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()],
        root.path(),
    );
    assert!(o.status.success());
    assert_eq!(std::fs::read(again.join(ROUNDS_FILE)).unwrap(), first);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let root = tempfile::tempdir().unwrap();
    let o = fedlm(&["run", "--set", "federation.bogus=1"], root.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fedlm(&["run", "--set", "federation.topology=mesh"], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mesh"));
    let o = fedlm(&["run", "--set", "experiment.preset=hetero-5"], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(std::fs::read_dir(root.path()).unwrap().next().is_none());
}

#[test]
fn sweep_over_clients_per_round_emits_one_directory_per_point() {
    let root = tempfile::tempdir().unwrap();
    let mut args = with_sets(vec!["sweep"], &TINY);
    args = with_sets(
        args,
        &[
            "experiment.name=kgrid",
            "federation.population=16",
            "federation.rounds=1",
            "federation.local_steps=1",
            "data.tokens_per_client=300",
        ],
    );
    args.extend(["--param", "federation.clients_per_round", "--values", "1,2,4,8,16"]);
    let o = fedlm(&args, root.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for k in [1usize, 2, 4, 8, 16] {
        let dir = root.path().join("kgrid").join(format!("federation.clients_per_round={k}"));
        let rows = read_rounds(&dir.join(ROUNDS_FILE)).unwrap();
        assert_eq!(rows[0].sampled().len(), k);
    }
}

#[test]
fn heterogeneity_presets_build_by_source_plans() {
    for (preset, clients) in [("hetero-4", 4), ("hetero-8", 8), ("hetero-16", 16)] {
        let mut b = SpecBuilder::new();
        b.set(&format!("experiment.preset={preset}")).unwrap();
        b.set("data.tokens_per_client=500").unwrap();
        let spec = b.build().unwrap();
        let data = build_data(&spec).unwrap();
        assert_eq!(data.plan.num_clients(), clients);
        let per_source = clients / 4;
        for c in 0..clients {
            let sources = data.plan.client_sources(c).unwrap();
            assert_eq!(sources.len(), 1);
            assert_eq!(sources[0].index(), c / per_source);
        }
    }
}
