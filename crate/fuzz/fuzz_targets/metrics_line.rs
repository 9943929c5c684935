#![no_main]

use libfuzzer_sys::fuzz_target;
use velora_harness::metrics::parse_metrics_line;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_metrics_line(line) {
        let text = parsed.to_line();
        assert_eq!(parse_metrics_line(&text).expect("own output parses"), parsed);
    }
});
