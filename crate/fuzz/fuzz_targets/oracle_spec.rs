#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    // Only parsing and validation: simulating an arbitrary spec could run for
    // arbitrarily long.
    let _ = cohortfix_core::oracle::parse_oracle_spec(&text);
});
