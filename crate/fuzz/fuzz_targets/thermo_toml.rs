#![no_main]

use flowopt::flowsheet::ThermoConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ThermoConfig::from_toml_str(s) {
        if cfg.validate().is_ok() {
            let _ = cfg.elements();
            let _ = ThermoConfig::from_toml_str(&cfg.to_toml_string()).expect("round trip");
        }
    }
});
