#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = fresco::config::ScenarioConfig::from_toml_str(text) {
            fresco::config::ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        }
    }
});
