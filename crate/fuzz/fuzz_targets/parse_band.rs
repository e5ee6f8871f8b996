#![no_main]

use libfuzzer_sys::fuzz_target;
use bandswap_core::spectral::parse_band;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((lo, hi)) = parse_band(text) {
        assert!(0.0 <= lo && lo < hi && hi <= 1.0);
    }
});
