#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(parsed) = cohortfix_core::ingest::parse_population_str(&text, "fuzz") {
        let again = cohortfix_core::ingest::format_population(&parsed);
        let _ = cohortfix_core::ingest::parse_population_str(&again, "fuzz").unwrap();
    }
});
