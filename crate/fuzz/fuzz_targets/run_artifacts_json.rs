#![no_main]
//! Suite artifacts read back by `report`: budgets.json and run.json.

use libfuzzer_sys::fuzz_target;
use mccpo::harness::{BudgetFile, RunRecord};

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<BudgetFile>(data);
    let _ = serde_json::from_slice::<RunRecord>(data);
});
