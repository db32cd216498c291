#![no_main]

use libfuzzer_sys::fuzz_target;
use putr::data::{format_xyz, parse_xyz};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cloud) = parse_xyz(text) {
        assert!(cloud.points().iter().flatten().all(|v| v.is_finite()));
        let again = parse_xyz(&format_xyz(&cloud)).expect("formatted cloud reparses");
        assert_eq!(again.len(), cloud.len());
    }
});
