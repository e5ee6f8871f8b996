#![no_main]

use libfuzzer_sys::fuzz_target;
use bandswap_core::gate::{format_gate_list, parse_gate_list};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(hard) = parse_gate_list(text) {
        assert_eq!(parse_gate_list(&format_gate_list(&hard)).unwrap(), hard);
    }
});
