#![no_main]

use bcnn::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = text.parse::<RunConfig>() {
            assert!(cfg.validate().is_ok());
        }
    }
});
