#![no_main]

use libfuzzer_sys::fuzz_target;
use tsdistill::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode(data) {
        // The format has no slack: an accepted buffer re-encodes to itself.
        assert_eq!(encode(&tensors), data);
    }
});
