#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = fresco::io::params_from_text(text) {
            // accepted input must survive a round trip
            let again = fresco::io::params_from_text(&fresco::io::params_to_text(&p)).unwrap();
            assert_eq!(again.len(), p.len());
        }
    }
});
