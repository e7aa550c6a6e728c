#![no_main]
use conformal_policy::predictor::Predictor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(model) = Predictor::from_text(text) {
            let again = Predictor::from_text(&model.to_text()).expect("serialized model reloads");
            assert_eq!(again.input_dim(), model.input_dim());
        }
    }
});
