#![no_main]

use libfuzzer_sys::fuzz_target;
use bandswap_core::gate::{decode_gate, encode_gate};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_gate(data, 1.0) {
        let bytes = encode_gate(&params);
        assert_eq!(encode_gate(&decode_gate(&bytes, 1.0).unwrap()), bytes);
    }
});
