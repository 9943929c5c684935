#![no_main]

use libfuzzer_sys::fuzz_target;
use velora_harness::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // anything accepted re-encodes to the same bytes
        assert_eq!(ck.encode(), data);
    }
});
