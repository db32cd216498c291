#![no_main]

use libfuzzer_sys::fuzz_target;
use putr::model::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::from_kv(text) {
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).expect("serialized config reparses"), cfg);
    }
});
