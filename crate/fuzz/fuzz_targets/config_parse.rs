#![no_main]
use conformal_policy::runner::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            // anything the parser accepts must have passed validation
            assert!(cfg.validate().is_ok());
        }
    }
});
