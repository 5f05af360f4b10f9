//! Arbitrary bytes through the token-trace CSV reader.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = kinetok::data::parse_token_csv(data);
});
