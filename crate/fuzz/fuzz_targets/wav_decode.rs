#![no_main]

use libfuzzer_sys::fuzz_target;
use vocoguard::data::decode_wav;

fuzz_target!(|data: &[u8]| {
    if let Ok((samples, rate)) = decode_wav(data) {
        assert!(rate > 0);
        assert!(samples.iter().all(|s| s.is_finite()));
    }
});
