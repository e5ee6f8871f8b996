#![no_main]

use libfuzzer_sys::fuzz_target;
use bandswap_core::io::{decode_fimg, encode_fimg};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_fimg(data) {
        let bytes = encode_fimg(&img);
        assert_eq!(encode_fimg(&decode_fimg(&bytes).unwrap()), bytes);
    }
});
