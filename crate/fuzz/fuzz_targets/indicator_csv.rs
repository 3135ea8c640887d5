#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let _ = cohortfix_core::correction::parse_indicator_csv(&text, "fuzz", "SIM");
});
