#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(cfg) = cohortfix_core::pipeline::parse_run_config(&text, "fuzz", std::path::Path::new(".")) {
        let _ = cfg.validate();
        let _ = cfg.hash();
    }
});
