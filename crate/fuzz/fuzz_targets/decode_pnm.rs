#![no_main]

use libfuzzer_sys::fuzz_target;
use bandswap_core::io::{decode_pnm, encode_pnm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        let bytes = encode_pnm(&img);
        assert_eq!(encode_pnm(&decode_pnm(&bytes).unwrap()), bytes);
    }
});
