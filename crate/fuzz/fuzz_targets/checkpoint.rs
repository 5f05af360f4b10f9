//! Arbitrary bytes through the binary checkpoint decoder.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = kinetok::model::checkpoint_from_bytes(data);
});
