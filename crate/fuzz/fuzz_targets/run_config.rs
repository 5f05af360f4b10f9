//! Arbitrary text through the TOML run-configuration parser and validator.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = kinetok::config::parse_run_config(text);
    }
});
