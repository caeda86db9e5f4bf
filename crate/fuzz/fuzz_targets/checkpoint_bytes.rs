#![no_main]
//! MLP checkpoints: truncated or corrupt bytes must fail with an error.

use libfuzzer_sys::fuzz_target;
use mccpo::neural::MlpParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = MlpParams::from_bytes(data) {
        assert_eq!(MlpParams::from_bytes(&p.to_bytes()).expect("own output parses"), p);
    }
});
