//! Resuming and forcing pipeline stages on the fixture configuration.

use std::fs;
use std::path::Path;

use thematica::pipeline::{self, BackendChoice, PipelineConfig, Runner, Stage, StageStatus};

fn config() -> PipelineConfig {
    PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture-run.toml")).unwrap()
}

fn open(dir: &Path, force: bool) -> Runner {
    Runner::open(config(), dir, BackendChoice::Mock, force).unwrap()
}

#[test]
fn deleted_personas_are_rebuilt_without_recoding() {
    let dir = tempfile::tempdir().unwrap();
    open(dir.path(), false).run_all().unwrap();
    let first = fs::read(dir.path().join("05-personas/persona-01.md")).unwrap();
    fs::remove_dir_all(dir.path().join("05-personas")).unwrap();

    let mut runner = open(dir.path(), false);
    let records = runner.run_all().unwrap();
    let status: Vec<StageStatus> = records.iter().map(|r| r.status).collect();
    assert_eq!(
        status,
        [
            StageStatus::Cached,
            StageStatus::Cached,
            StageStatus::Cached,
            StageStatus::Cached,
            StageStatus::Success
        ]
    );
    let mock = runner.mock().unwrap();
    assert!(mock.transmitted().iter().all(|r| r.stage == "personas"));
    assert_eq!(fs::read(dir.path().join("05-personas/persona-01.md")).unwrap(), first);
}

#[test]
fn config_change_reruns_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    open(dir.path(), false).run_all().unwrap();

    let mut changed = config();
    changed.personas.count = 2;
    let mut runner = Runner::open(changed, dir.path(), BackendChoice::Mock, false).unwrap();
    let records = runner.run_all().unwrap();
    assert_eq!(records[3].status, StageStatus::Cached);
    assert_eq!(records[4].status, StageStatus::Success);
    assert_eq!(records[4].metrics["personas"], 2);
}

#[test]
fn forced_stage_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    open(dir.path(), false).run_all().unwrap();
    let mut runner = open(dir.path(), true);
    let record = runner.run_stage(Stage::Ingest).unwrap();
    assert_eq!(record.status, StageStatus::Success);
    drop(runner);

    let manifest = pipeline::load_manifest(dir.path()).unwrap().unwrap();
    assert!(manifest.record(Stage::Ingest).is_some());
    for stage in &Stage::ALL[1..] {
        assert!(manifest.record(*stage).is_none());
    }
    let report = pipeline::report(&manifest);
    assert!(!report.lines().any(|l| l.starts_with("personas")), "{report}");

    let records = open(dir.path(), false).run_all().unwrap();
    assert_eq!(records[1].status, StageStatus::Success);
}

#[test]
fn example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("thematica.example.toml");
    let config = PipelineConfig::from_toml(&fs::read_to_string(&path).unwrap(), &path).unwrap();
    assert_eq!(config.model.context_limit, 16385);
    assert_eq!(config.themes.counts.traits, 8);
}
