#![no_main]

use flowopt::flowsheet::FlowsheetParams;
use flowopt::sweep::SweepConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let _ = FlowsheetParams::from_toml_str(s);
    if let Ok(cfg) = SweepConfig::from_toml_str(s) {
        assert!(cfg.grid.instances() > 0);
    }
});
