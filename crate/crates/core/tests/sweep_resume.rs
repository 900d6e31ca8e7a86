mod common;

use std::fs;

use cfcount::client::{RecordingClient, ReplayClient, RetryPolicy};
use cfcount::config::{enumerate_configs, parse_config_label, SweepGrid};
use cfcount::manifest::{load_manifest, ImageKind};
use cfcount::questions::QuestionFormat;
use cfcount::sweep::{run_sweep, SweepError, SweepOptions, CHECKPOINT_FILE, FAILURES_FILE, RECORDS_FILE};
use common::{write_fixture, ScriptedClient};

fn options(dir: &std::path::Path) -> SweepOptions {
    let mut o = SweepOptions::new(dir);
    o.formats = vec![QuestionFormat::Oe, QuestionFormat::Mcq];
    o.retry = RetryPolicy::no_delay(2);
    o.seed = 11;
    o
}

fn small_configs() -> Vec<cfcount::ModulationConfig> {
    ["Baseline", "TupBmask(1.5,0,MBB,All)", "Bdown(1.0,0.5,BB,Early)", "Whole(2.0,1.0,WholeImg,Late)"]
        .iter()
        .map(|l| parse_config_label(l).unwrap())
        .collect()
}

#[test]
fn one_instance_both_formats_standard_grid() {
    let data = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_fixture(data.path(), 1)).unwrap();
    let configs = enumerate_configs(&SweepGrid::standard()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let client = ScriptedClient::new();
    let outcome = run_sweep(&manifest, &configs, &client, &options(out.path())).unwrap();
    assert_eq!(outcome.records.len(), 890);
    assert!(outcome.is_complete());
    assert!(outcome.records.iter().all(|r| r.is_consistent()));
    let mut keys: Vec<_> = outcome.records.iter().map(|r| r.sort_key()).collect();
    let sorted = keys.clone();
    keys.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn rerun_is_all_checkpoint_hits() {
    let data = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_fixture(data.path(), 6)).unwrap();
    let out = tempfile::tempdir().unwrap();
    let first = ScriptedClient::new();
    let a = run_sweep(&manifest, &small_configs(), &first, &options(out.path())).unwrap();
    assert!(first.calls() >= a.records.len());
    let bytes = fs::read(out.path().join(RECORDS_FILE)).unwrap();

    // without --resume an existing checkpoint is refused
    let second = ScriptedClient::new();
    assert!(matches!(
        run_sweep(&manifest, &small_configs(), &second, &options(out.path())),
        Err(SweepError::CheckpointExists(_))
    ));

    let mut o = options(out.path());
    o.resume = true;
    let b = run_sweep(&manifest, &small_configs(), &second, &o).unwrap();
    assert_eq!(second.calls(), 0);
    assert_eq!(b.reused, b.total_cells);
    assert_eq!(fs::read(out.path().join(RECORDS_FILE)).unwrap(), bytes);
}

#[test]
fn interrupted_then_resumed_matches_uninterrupted() {
    let data = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_fixture(data.path(), 8)).unwrap();

    let clean = tempfile::tempdir().unwrap();
    let reference = ScriptedClient::new();
    run_sweep(&manifest, &small_configs(), &reference, &options(clean.path())).unwrap();
    let expected = fs::read(clean.path().join(RECORDS_FILE)).unwrap();

    let broken = tempfile::tempdir().unwrap();
    let mut crashing = ScriptedClient::new();
    crashing.fail_after = Some(25);
    let mut o = options(broken.path());
    o.max_inflight = 3;
    assert!(run_sweep(&manifest, &small_configs(), &crashing, &o).is_err());

    // simulate a write torn by the crash
    let ckpt = broken.path().join(CHECKPOINT_FILE);
    let mut text = fs::read_to_string(&ckpt).unwrap();
    assert!(!text.is_empty());
    text.push_str("{\"key\":\"abc\",\"rec");
    fs::write(&ckpt, text).unwrap();

    let resumed = ScriptedClient::new();
    o.resume = true;
    let outcome = run_sweep(&manifest, &small_configs(), &resumed, &o).unwrap();
    assert!(outcome.reused > 0 && outcome.is_complete());
    assert!(resumed.calls() < reference.calls());
    assert_eq!(fs::read(broken.path().join(RECORDS_FILE)).unwrap(), expected);
}

#[test]
fn concurrency_does_not_change_output() {
    let data = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_fixture(data.path(), 10)).unwrap();
    let mut outputs = Vec::new();
    for inflight in [1, 4] {
        let out = tempfile::tempdir().unwrap();
        let mut o = options(out.path());
        o.max_inflight = inflight;
        run_sweep(&manifest, &small_configs(), &ScriptedClient::new(), &o).unwrap();
        outputs.push(fs::read(out.path().join(RECORDS_FILE)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn failed_cells_are_recorded_not_fabricated() {
    let data = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_fixture(data.path(), 5)).unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut client = ScriptedClient::new();
    // about one request in sixteen hits a persistent outage
    client.flaky_prefix = Some("a".into());
    let outcome = run_sweep(&manifest, &small_configs(), &client, &options(out.path())).unwrap();
    assert!(!outcome.failures.is_empty());
    assert_eq!(outcome.records.len() + outcome.failures.len(), outcome.total_cells);
    assert!(!outcome.is_complete());
    let failures = fs::read_to_string(out.path().join(FAILURES_FILE)).unwrap();
    assert_eq!(failures.lines().count(), outcome.failures.len());
    assert!(failures.contains("scripted outage"));

    // a later resume with a healthy endpoint fills exactly the gaps
    let healthy = ScriptedClient::new();
    let mut o = options(out.path());
    o.resume = true;
    let done = run_sweep(&manifest, &small_configs(), &healthy, &o).unwrap();
    assert!(done.is_complete());
    assert_eq!(done.reused, outcome.records.len());
    assert_eq!(fs::read_to_string(out.path().join(FAILURES_FILE)).unwrap(), "");
}

#[test]
fn modulation_requires_capability() {
    let data = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_fixture(data.path(), 2)).unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut client = ScriptedClient::new();
    client.caps = cfcount::client::Capabilities::default();
    let err = run_sweep(&manifest, &small_configs(), &client, &options(out.path())).unwrap_err();
    assert!(matches!(err, SweepError::Client(cfcount::client::ClientError::Unsupported { .. })), "{err}");
    assert_eq!(client.calls(), 0);

    // baseline alone needs no capabilities
    let out = tempfile::tempdir().unwrap();
    let baseline = [cfcount::ModulationConfig::baseline()];
    assert!(run_sweep(&manifest, &baseline, &client, &options(out.path())).unwrap().is_complete());
}

#[test]
fn replay_reproduces_recorded_run() {
    let data = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&write_fixture(data.path(), 4)).unwrap();
    let fixture = data.path().join("fixture.jsonl");

    let live = tempfile::tempdir().unwrap();
    let mut o = options(live.path());
    o.image_kinds = vec![ImageKind::Factual, ImageKind::Counterfactual];
    let recorder = RecordingClient::new(ScriptedClient::new(), &fixture).unwrap();
    run_sweep(&manifest, &small_configs(), &recorder, &o).unwrap();

    let replayed = tempfile::tempdir().unwrap();
    o.out_dir = replayed.path().to_path_buf();
    let replay = ReplayClient::open(&fixture).unwrap();
    assert!(run_sweep(&manifest, &small_configs(), &replay, &o).unwrap().is_complete());
    assert_eq!(
        fs::read(live.path().join(RECORDS_FILE)).unwrap(),
        fs::read(replayed.path().join(RECORDS_FILE)).unwrap()
    );

    // a different seed changes MCQ prompts, which the fixture has never seen
    let other = tempfile::tempdir().unwrap();
    o.out_dir = other.path().to_path_buf();
    o.seed += 1;
    let outcome = run_sweep(&manifest, &small_configs(), &replay, &o).unwrap();
    assert!(!outcome.failures.is_empty());
    assert!(outcome.failures.iter().all(|f| f.format == QuestionFormat::Mcq));
}
