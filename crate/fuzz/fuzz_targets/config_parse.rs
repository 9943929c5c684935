#![no_main]

use libfuzzer_sys::fuzz_target;
use velora_harness::parse_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        // a valid config must survive its own canonical form unchanged
        let again = parse_config(&cfg.to_canonical()).expect("canonical config parses");
        assert_eq!(again, cfg);
    }
});
