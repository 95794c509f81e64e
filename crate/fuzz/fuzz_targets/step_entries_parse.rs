#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = qtk_core::steps::parse_entries(text) {
        assert!(entries.iter().all(|e| e.validate().is_ok()));
    }
    if let Ok(loaded) = qtk_cli::commands::parse_steps(text) {
        assert!(loaded.entries.iter().all(|e| e.validate().is_ok()));
    }
});
