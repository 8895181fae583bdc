use std::path::{Path, PathBuf};
use std::process::Command;

use fire_cli::config::RunConfig;
use fire_cli::fixture::write_mini_fixture;
use fire_cli::manifest::RunLock;
use fire_cli::pipeline::{run, Action, RunOptions, Stage, REPORT};

fn fixture(dir: &Path) -> PathBuf {
    write_mini_fixture(dir).unwrap()
}

fn fire(config: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fire"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn full_run_then_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let (code, stdout, stderr) = fire(&config, &[]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("report: done"));
    assert!(dir.path().join("out").join(REPORT).is_file());

    let (code, stdout, _) = fire(&config, &["--stage", "explain"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("explain: up to date"), "{stdout}");
    assert!(stdout.contains("0 backend calls"));
}

#[test]
fn editing_k_u_blocks_featurize_until_cluster_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    assert_eq!(fire(&config, &["--stage", "ingest"]).0, 0);
    assert_eq!(fire(&config, &["--stage", "extract"]).0, 0);
    assert_eq!(fire(&config, &["--stage", "cluster"]).0, 0);
    assert_eq!(fire(&config, &["--stage", "featurize"]).0, 0);

    let text = std::fs::read_to_string(&config).unwrap().replace("k_u = 6", "k_u = 5");
    std::fs::write(&config, text).unwrap();
    let (code, _, stderr) = fire(&config, &["--stage", "featurize"]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("cluster"));

    assert_eq!(fire(&config, &["--stage", "cluster"]).0, 0);
    let (code, stdout, _) = fire(&config, &["--stage", "featurize"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("featurize: done"));
}

#[test]
fn force_overrides_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    assert_eq!(fire(&config, &["--stage", "ingest"]).0, 0);
    assert_eq!(fire(&config, &["--stage", "extract"]).0, 0);
    // A different seed changes the split, so extract is now stale.
    assert_eq!(fire(&config, &["--stage", "ingest", "--seed", "8"]).0, 0);
    assert_eq!(fire(&config, &["--stage", "cluster", "--seed", "8"]).0, 3);
    assert_eq!(fire(&config, &["--stage", "cluster", "--seed", "8", "--force"]).0, 0);
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let (code, _, stderr) = fire(&config, &["--stage", "train"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("run stage ingest first"), "{stderr}");
}

#[test]
fn config_errors_exit_2_and_list_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(
        &config,
        "[dataset]\npath = \"missing.jsonl\"\n\n[domain]\nname = \"nowhere\"\n\n[explainer]\ntop_k = 0\n",
    )
    .unwrap();
    let (code, _, stderr) = fire(&config, &[]);
    assert_eq!(code, 2);
    assert!(stderr.contains("dataset.path") && stderr.contains("domain.name") && stderr.contains("top_k"), "{stderr}");
}

#[test]
fn remote_without_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_fire"))
        .arg("--config")
        .arg(&config)
        .args(["--backend", "remote"])
        .env_remove("FIRE_API_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_remote_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    assert_eq!(fire(&config, &["--stage", "ingest"]).0, 0);
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("backend = \"mock\"", "backend = \"remote\"\nbase_url = \"http://127.0.0.1:9\"\nmax_retries = 0\nretry_backoff_ms = 1\nrequest_timeout_secs = 2");
    std::fs::write(&config, text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fire"))
        .arg("--config")
        .arg(&config)
        .args(["--stage", "extract"])
        .env("FIRE_API_KEY", "test-key")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn a_held_lock_refuses_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path());
    let _held = RunLock::acquire(&dir.path().join("out")).unwrap();
    let (code, _, stderr) = fire(&config, &["--stage", "ingest"]);
    assert_eq!(code, 1);
    assert!(stderr.contains(".lock"));
}

#[test]
fn library_run_reports_actions_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::load(&fixture(dir.path())).unwrap();
    let first = run(&config, RunOptions::default()).unwrap();
    assert_eq!(first.stages.iter().map(|s| s.0).collect::<Vec<_>>(), Stage::ALL.to_vec());
    assert!(first.stages.iter().all(|s| s.1 == Action::Ran));
    let second = run(&config, RunOptions::default()).unwrap();
    assert!(second.stages.iter().all(|s| s.1 == Action::UpToDate));

    // A hand-edited artifact invalidates its own stage and everything below.
    let stats = config.run.output_dir.join("stats.json");
    std::fs::write(&stats, "{}").unwrap();
    let third = run(&config, RunOptions::default()).unwrap();
    assert_eq!(third.stages[0], (Stage::Ingest, Action::Ran));
    assert!(third.stages[1..].iter().all(|s| s.1 == Action::UpToDate));
    let report = run(&config, RunOptions { stage: Some(Stage::Report), force: false }).unwrap();
    assert_eq!(report.stages, vec![(Stage::Report, Action::UpToDate)]);
}
