mod common;

use std::fs;
use std::path::Path;

use fusegen::manifest::RunManifest;
use fusegen::orchestrator::round_quota;
use fusegen::selection::SelectionReport;
use fusegen::{Mode, Orchestrator, RunConfig, SyntheticDataset};

const ARTIFACTS: &[&str] = &[
    "config.toml",
    "testset.jsonl",
    "merged.jsonl",
    "model.json",
    "dynamics.json",
    "cartography.csv",
    "report.json",
    "report.txt",
    "rounds/round_0/mock-0.jsonl",
    "rounds/round_1/selection.json",
    "rounds/round_2/mock-1.jsonl",
    "weights/epoch_000.csv",
    "weights/epoch_005.csv",
];

fn run(config: &RunConfig, dir: &Path) -> fusegen::SeedReport {
    Orchestrator::new(config, 0, dir).unwrap().run().unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

#[test]
fn identical_inputs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let report_a = run(&config, &a);
    let report_b = run(&config, &b);
    assert_eq!(report_a, report_b);
    for name in ARTIFACTS {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs between runs");
    }
}

#[test]
fn run_directory_layout_and_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::small_config(tmp.path());
    let dir = tmp.path().join("run");
    let report = run(&config, &dir);
    for name in ARTIFACTS {
        assert!(dir.join(name).exists(), "missing {name}");
    }
    assert!(!dir.join("weights/epoch_006.csv").exists());
    assert_eq!(report.dataset_size, 2 * 60);
    assert_eq!(report.rounds.len(), 3);
    for (j, round) in report.rounds.iter().enumerate() {
        assert_eq!(round.per_plm_counts["mock-0"], round_quota(60, 2, j));
        assert_eq!(round.selected["shared"].len(), 4);
    }
    let schema = common::imdb_template().schema;
    let merged = SyntheticDataset::load_jsonl(dir.join("merged.jsonl"), &schema).unwrap();
    let total: f64 = merged.weights().iter().sum();
    assert!((total - 60.0).abs() < 1e-9);
    let manifest = RunManifest::load(dir.join("manifest.json")).unwrap();
    assert!(manifest.completed);
    assert_eq!(manifest.config_digest, config.digest());
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::small_config(tmp.path());
    let full = tmp.path().join("full");
    run(&config, &full);

    // Rebuild the state of a run killed during round 1: round 0 recorded,
    // one backend's round-1 checkpoint written, nothing after.
    let cut = tmp.path().join("cut");
    fs::create_dir_all(cut.join("rounds/round_0")).unwrap();
    fs::create_dir_all(cut.join("rounds/round_1")).unwrap();
    for name in ["rounds/round_0/mock-0.jsonl", "rounds/round_0/mock-1.jsonl", "rounds/round_0/selection.json", "rounds/round_1/mock-0.jsonl"] {
        fs::copy(full.join(name), cut.join(name)).unwrap();
    }
    let mut manifest = RunManifest::load(full.join("manifest.json")).unwrap();
    manifest.rounds.truncate(1);
    manifest.completed = false;
    manifest.save(cut.join("manifest.json")).unwrap();

    let resumed = run(&config, &cut);
    assert_eq!(resumed, serde_json::from_slice(&read(&full, "report.json")).unwrap());
    for name in ["merged.jsonl", "report.json", "model.json", "rounds/round_2/selection.json", "weights/epoch_005.csv"] {
        assert_eq!(read(&full, name), read(&cut, name), "{name} differs after resume");
    }
    let manifest = RunManifest::load(cut.join("manifest.json")).unwrap();
    assert!(manifest.events.iter().any(|e| e.contains("reused checkpoint of round 1")));
}

#[test]
fn finished_run_is_not_recomputed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::small_config(tmp.path());
    let dir = tmp.path().join("run");
    let first = run(&config, &dir);
    fs::remove_file(dir.join("merged.jsonl")).unwrap();
    assert_eq!(run(&config, &dir), first);
    assert!(!dir.join("merged.jsonl").exists());
}

#[test]
fn foreign_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::small_config(tmp.path());
    let dir = tmp.path().join("run");
    run(&config, &dir);
    let mut other = config.clone();
    other.alpha = 0.25;
    let err = Orchestrator::new(&other, 0, &dir).err().expect("digest mismatch");
    assert!(err.is_config(), "{err}");
    assert!(Orchestrator::new(&config, 1, &dir).is_err());
}

#[test]
fn invalid_config_creates_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = common::small_config(tmp.path());
    config.template_path = tmp.path().join("missing.toml").display().to_string();
    let dir = tmp.path().join("run");
    assert!(Orchestrator::new(&config, 0, &dir).is_err());
    assert!(!dir.exists());
}

fn selection_reports(dir: &Path, round: usize) -> Vec<SelectionReport> {
    serde_json::from_slice(&read(dir, &format!("rounds/round_{round}/selection.json"))).unwrap()
}

#[test]
fn modes_differ_in_feedback_and_weighting() {
    let tmp = tempfile::tempdir().unwrap();
    let base = common::small_config(tmp.path());

    let no_swa = RunConfig { mode: Mode::NoSwa, ..base.clone() };
    let dir = tmp.path().join("no_swa");
    let report = run(&no_swa, &dir);
    assert!(report.swa.is_none());
    assert!(!dir.join("weights").exists());
    assert_eq!(selection_reports(&dir, 0)[0].candidate_strategy, "variability");
    let schema = common::imdb_template().schema;
    let merged = SyntheticDataset::load_jsonl(dir.join("merged.jsonl"), &schema).unwrap();
    assert!(merged.weights().iter().all(|&w| w == 0.5));

    let zerogen = RunConfig { mode: Mode::ZerogenMixed, ..base.clone() };
    let dir = tmp.path().join("zerogen");
    let report = run(&zerogen, &dir);
    assert_eq!(report.rounds.len(), 1);
    assert_eq!(report.rounds[0].per_plm_counts["mock-1"], 60);
    assert!(report.rounds[0].selected.is_empty());
    assert!(report.swa.is_none());

    let sdg = RunConfig { mode: Mode::SdgMixed, ..base.clone() };
    let dir = tmp.path().join("sdg");
    run(&sdg, &dir);
    let groups: Vec<String> = selection_reports(&dir, 0).into_iter().map(|r| r.group).collect();
    assert_eq!(groups, vec!["mock-0".to_string(), "mock-1".to_string()]);
    for report in selection_reports(&dir, 1) {
        assert!(report.selected.iter().all(|s| s.sample_id.starts_with(&format!("{}:", report.group))));
        assert_eq!(report.candidate_strategy, "random");
    }

    let mut single = RunConfig { mode: Mode::SinglePlm, ..base };
    single.backends.truncate(1);
    single.r_candidates = 5;
    let dir = tmp.path().join("single");
    let report = run(&single, &dir);
    assert_eq!(report.dataset_size, 60);
    assert!(report.swa.is_some());
    assert_eq!(selection_reports(&dir, 0)[0].candidate_strategy, "random");
}
