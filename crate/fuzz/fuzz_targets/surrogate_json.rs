#![no_main]

use flowopt::surrogate::{Predictor, Surrogate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(model) = Surrogate::from_json(s) {
        // validated surrogates evaluate without panicking
        let _ = model.predict(&vec![0.5; model.input_names().len()]);
    }
});
