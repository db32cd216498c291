#![no_main]

use libfuzzer_sys::fuzz_target;
use putr::pipeline::RunManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<RunManifest>(data) {
        let _ = m.validate();
    }
});
