#![no_main]

use libfuzzer_sys::fuzz_target;
use bandswap_core::data::{format_index, parse_index};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_index(text) {
        assert_eq!(parse_index(&format_index(&entries)).unwrap(), entries);
    }
});
