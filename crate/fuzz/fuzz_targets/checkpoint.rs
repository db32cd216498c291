#![no_main]

use libfuzzer_sys::fuzz_target;
use putr::data::{decode_checkpoint, RawCheckpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = RawCheckpoint::decode(data) {
        // Decoding is canonical: an accepted buffer re-encodes to itself.
        assert_eq!(raw.encode().expect("decoded checkpoint encodes"), data);
    }
    let _ = decode_checkpoint(data);
});
