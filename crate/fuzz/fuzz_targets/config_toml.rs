#![no_main]
//! Experiment configs: parsing and validation must reject, never panic.

use libfuzzer_sys::fuzz_target;
use mccpo::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        // Accepted configs hash and describe their baseline deterministically.
        assert_eq!(cfg.hash(), cfg.clone().hash());
        let _ = cfg.baseline_hash();
        let _ = cfg.env.build();
    }
});
