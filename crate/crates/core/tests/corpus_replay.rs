//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets make, so the seeds stay valid as formats evolve.

use std::fs;
use std::path::{Path, PathBuf};

use mccpo::feasibility::PrereqGraph;
use mccpo::harness::{BudgetFile, ExperimentConfig, RunRecord};
use mccpo::neural::MlpParams;
use mccpo::policy::TabularPolicyParams;
use mccpo::train::{read_history_csv, write_history_csv};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_")))
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn expect_bad(p: &Path) -> bool {
    p.file_name().unwrap().to_string_lossy().starts_with("seed_bad_")
}

/// Each seed must be accepted or rejected as its name says.
fn replay(target: &str, check: impl Fn(&[u8]) -> bool) {
    for (path, bytes) in seeds(target) {
        assert_eq!(check(&bytes), !expect_bad(&path), "{}", path.display());
    }
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).expect("utf-8 seed")
}

#[test]
fn config_toml() {
    replay("config_toml", |b| match ExperimentConfig::from_toml(text(b)) {
        Ok(cfg) => {
            assert_eq!(cfg.hash(), cfg.clone().hash());
            cfg.env.build().is_ok()
        }
        Err(_) => false,
    });
}

#[test]
fn prereq_graph_json() {
    replay("prereq_graph_json", |b| match PrereqGraph::from_json(text(b)) {
        Ok(g) => {
            assert_eq!(PrereqGraph::from_json(&g.to_json()).unwrap(), g);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn policy_params_json() {
    replay("policy_params_json", |b| match TabularPolicyParams::from_json(text(b)) {
        Ok(p) => {
            assert_eq!(TabularPolicyParams::from_json(&p.to_json()).unwrap(), p);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn checkpoint_bytes() {
    replay("checkpoint_bytes", |b| match MlpParams::from_bytes(b) {
        Ok(p) => {
            assert_eq!(p.to_bytes(), b);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn history_csv() {
    replay("history_csv", |b| match read_history_csv(b) {
        Ok(rows) => {
            let mut out = Vec::new();
            write_history_csv(&rows, &mut out).unwrap();
            assert_eq!(read_history_csv(out.as_slice()).unwrap(), rows);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn run_artifacts_json() {
    replay("run_artifacts_json", |b| {
        serde_json::from_slice::<BudgetFile>(b).is_ok() || serde_json::from_slice::<RunRecord>(b).is_ok()
    });
}
