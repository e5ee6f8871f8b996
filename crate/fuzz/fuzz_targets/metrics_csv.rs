#![no_main]

use libfuzzer_sys::fuzz_target;
use bandswap_core::metrics::RunMetrics;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RunMetrics::from_csv(text) {
        let again = RunMetrics::from_csv(&m.to_csv()).expect("written csv parses");
        assert_eq!(again.rows().len(), m.rows().len());
    }
});
