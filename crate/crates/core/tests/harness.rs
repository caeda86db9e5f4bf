use std::fs;
use std::path::Path;

use mccpo::harness::{load_report, run_suite_with, BudgetFile, ExperimentConfig, RunOptions, RunRecord};
use mccpo::train::read_history_csv;
use mccpo::Error;

const SMALL: &str = r#"
name = "small"
methods = ["unconstrained", "posthoc", "mccpo"]
seeds = [3, 4]
final_window = 100
eval_episodes = 100
baseline_eval_episodes = 100

[env]
kind = "minimal"

[tabular]
episodes = 500
"#;

fn opts(out: &Path) -> RunOptions {
    RunOptions { jobs: Some(2), seed_offset: 0, out_dir: Some(out.to_path_buf()) }
}

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_suite_with(&small(), &opts(a.path()), None).unwrap();
    let rb = run_suite_with(&small(), &RunOptions { jobs: Some(1), ..opts(b.path()) }, None).unwrap();
    for m in ["unconstrained", "posthoc", "mccpo"] {
        for s in [3, 4] {
            let rel = format!("small/{m}/{s}/history.csv");
            let (x, y) = (fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
            assert!(!x.is_empty());
            assert_eq!(x, y, "{rel} differs");
        }
    }
    assert_eq!(ra.report, rb.report);
    assert_eq!(fs::read(ra.dir.join("report.json")).unwrap(), fs::read(rb.dir.join("report.json")).unwrap());
}

#[test]
fn artifacts_round_trip_and_report_reaggregates() {
    let out = tempfile::tempdir().unwrap();
    let run = run_suite_with(&small(), &opts(out.path()), None).unwrap();
    assert_eq!(load_report(&run.dir).unwrap(), run.report);
    let record: RunRecord =
        serde_json::from_str(&fs::read_to_string(run.dir.join("mccpo/3/run.json")).unwrap()).unwrap();
    assert_eq!(record.config_hash, small().hash());
    assert!(record.failure.is_none());
    let rows = read_history_csv(fs::File::open(run.dir.join(&record.history_path)).unwrap()).unwrap();
    assert_eq!(rows.len(), 500);
    let posthoc = read_history_csv(fs::File::open(run.dir.join("posthoc/3/history.csv")).unwrap()).unwrap();
    assert_eq!(posthoc.len(), 100);
    let csv = fs::read_to_string(run.dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn seed_offset_shifts_every_seed() {
    let out = tempfile::tempdir().unwrap();
    let run = run_suite_with(&small(), &RunOptions { seed_offset: 10, ..opts(out.path()) }, None).unwrap();
    let seeds: Vec<u64> = run.report.method("mccpo").unwrap().seeds.iter().map(|s| s.seed).collect();
    assert_eq!(seeds, [13, 14]);
}

#[test]
fn budgets_are_cached_by_baseline_hash() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.budgets = None;
    let first = run_suite_with(&cfg, &opts(out.path()), None).unwrap();
    let stored = BudgetFile::read(&first.dir.join("budgets.json")).unwrap();
    assert_eq!(stored, first.budgets);
    assert_eq!(stored.baseline.seeds, 2);

    // Methods outside the baseline hash may change without re-running it.
    cfg.methods = vec![mccpo::train::Method::Mccpo];
    let second = run_suite_with(&cfg, &opts(out.path()), None).unwrap();
    assert_eq!(second.budgets, stored);
    assert_eq!(second.report.methods.len(), 1);

    // Changing the env changes the hash, so the stale cache is ignored.
    cfg.methods = vec![mccpo::train::Method::Unconstrained, mccpo::train::Method::Mccpo];
    cfg.env = mccpo::harness::EnvConfig::Minimal { reward_prog: 0.7, gamma: 0.99, theta_min: 0.5 };
    let third = run_suite_with(&cfg, &opts(out.path()), None).unwrap();
    assert_ne!(third.budgets.baseline_hash, stored.baseline_hash);
}

#[test]
fn constrained_only_suite_without_baseline_runs_one() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.budgets = None;
    cfg.methods = vec![mccpo::train::Method::Mccpo];
    let run = run_suite_with(&cfg, &opts(out.path()), None).unwrap();
    assert_eq!(run.budgets.baseline.seeds, 2);
    assert!(!run.dir.join("unconstrained").exists());
}

#[test]
fn failing_jobs_are_recorded_without_aborting() {
    let out = tempfile::tempdir().unwrap();
    let graph = out.path().join("cyclic.json");
    fs::write(&graph, r#"{"num_concepts": 2, "prereqs": {"0": [1], "1": [0]}}"#).unwrap();
    let text = format!(
        r#"
name = "broken"
methods = ["mccpo"]
seeds = [0, 1]
budgets = [1.0, 1.0, 1.0]

[env]
kind = "tutoring"
graph_file = "{}"
"#,
        graph.display()
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let run = run_suite_with(&cfg, &opts(out.path()), None).unwrap();
    let m = run.report.method("mccpo").unwrap();
    assert!(m.seeds.is_empty());
    assert_eq!(m.failures.len(), 2);
    assert!(m.failures.iter().all(|(_, msg)| msg.contains("cycle")), "{:?}", m.failures);
    let record: RunRecord =
        serde_json::from_str(&fs::read_to_string(run.dir.join("mccpo/1/run.json")).unwrap()).unwrap();
    assert!(record.result.is_none() && record.failure.is_some());
}

#[test]
fn invalid_configs_are_rejected() {
    let no_seeds = SMALL.replace("seeds = [3, 4]", "seeds = []");
    assert!(matches!(ExperimentConfig::from_toml(&no_seeds), Err(Error::ConfigInvalid(_))));
    let dup = SMALL.replace("seeds = [3, 4]", "seeds = [3, 3]");
    assert!(matches!(ExperimentConfig::from_toml(&dup), Err(Error::ConfigInvalid(_))));
    let unknown = format!("{SMALL}\nbogus = 1\n");
    assert!(ExperimentConfig::from_toml(&unknown).is_err());
    let window = SMALL.replace("final_window = 100", "final_window = 5000");
    assert!(matches!(ExperimentConfig::from_toml(&window), Err(Error::ConfigInvalid(_))));
}

#[test]
fn presets_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Some(cfg.name.as_str()), path.file_stem().and_then(|s| s.to_str()));
        n += 1;
    }
    assert_eq!(n, 5);
}
