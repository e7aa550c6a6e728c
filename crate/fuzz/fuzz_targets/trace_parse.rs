#![no_main]
use conformal_policy::runner::parse_traces;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_traces(text) {
            assert!(rows.iter().all(|r| r.consistent()));
        }
    }
});
