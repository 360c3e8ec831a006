#![no_main]

use libfuzzer_sys::fuzz_target;
use vocoguard::config::Settings;
use vocoguard::data::CorpusConfig;
use vocoguard::pipeline::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_text(text, "fuzz") {
        let again = TrainConfig::from_text(&cfg.to_text(), "fuzz").expect("resolved config re-parses");
        assert_eq!(again, cfg);
    }
    if let Ok(cfg) = CorpusConfig::from_text(text, "fuzz") {
        let again = CorpusConfig::from_text(&cfg.to_text(), "fuzz").expect("resolved config re-parses");
        assert_eq!(again, cfg);
    }
});
