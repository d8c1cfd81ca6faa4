#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(d) = fresco::io::dataset_from_csv(text) {
            let again = fresco::io::dataset_from_csv(&fresco::io::dataset_to_csv(&d)).unwrap();
            assert_eq!(again.samples.len(), d.samples.len());
        }
    }
});
