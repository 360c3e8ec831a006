#![no_main]

use libfuzzer_sys::fuzz_target;
use vocoguard::data::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text, "fuzz", ".".into()) {
            // Whatever parses must survive a write/read cycle.
            let again = parse_manifest(&m.to_csv(), "fuzz", ".".into()).expect("re-parse");
            assert_eq!(again.rows, m.rows);
        }
    }
});
