#![no_main]

use libfuzzer_sys::fuzz_target;
use putr::metrics::SurfaceRef;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = std::str::from_utf8(data) else { return };
    // Mesh specs read from disk; the OBJ target covers their contents.
    if spec.trim_start().starts_with("mesh") {
        return;
    }
    if let Ok(s) = SurfaceRef::parse(spec, None) {
        let again = SurfaceRef::parse(&s.to_string(), None).expect("displayed spec reparses");
        assert_eq!(again, s);
        let _ = s.distance(&[0.1, 0.2, 0.3]);
    }
});
