#![no_main]

use libfuzzer_sys::fuzz_target;
use mccpo::policy::TabularPolicyParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = TabularPolicyParams::from_json(text) {
        let again = TabularPolicyParams::from_json(&p.to_json()).expect("own output parses");
        assert_eq!(p, again);
    }
});
