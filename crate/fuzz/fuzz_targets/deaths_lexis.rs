#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(parsed) = cohortfix_core::ingest::parse_deaths_lexis_str(&text, "fuzz") {
        // Whatever parses must survive a format/parse round trip.
        let again = cohortfix_core::ingest::format_deaths_lexis(&parsed);
        let _ = cohortfix_core::ingest::parse_deaths_lexis_str(&again, "fuzz").unwrap();
    }
});
