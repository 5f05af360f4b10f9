//! Arbitrary bytes through the OHLCV CSV reader: must return, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = kinetok::data::parse_ohlcv_csv(data);
});
