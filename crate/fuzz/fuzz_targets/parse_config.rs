#![no_main]

use libfuzzer_sys::fuzz_target;
use wft_cli::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            // Accepted configs hash and expand seeds without panicking.
            let _ = cfg.hash();
            let _ = cfg.seeds();
            let _ = cfg.grid();
        }
    }
});
