#![no_main]
use conformal_policy::runner::trace::parse_sweep;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_sweep(text);
    }
});
