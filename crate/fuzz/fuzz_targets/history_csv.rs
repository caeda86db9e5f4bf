#![no_main]

use libfuzzer_sys::fuzz_target;
use mccpo::train::{read_history_csv, write_history_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_history_csv(data) {
        let mut out = Vec::new();
        write_history_csv(&rows, &mut out).expect("rows serialize");
        let again = read_history_csv(out.as_slice()).expect("own output parses");
        assert_eq!(rows.len(), again.len());
    }
});
