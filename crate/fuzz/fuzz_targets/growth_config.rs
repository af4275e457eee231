#![no_main]

use hetfx::discovery::GrowthConfig;
use libfuzzer_sys::fuzz_target;

// The first byte picks the format.
fuzz_target!(|data: &[u8]| {
    let Some((&format, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let parsed = if format % 2 == 0 {
        GrowthConfig::from_toml_str(text)
    } else {
        GrowthConfig::from_json_str(text)
    };
    if let Ok(config) = parsed {
        config.validate().expect("parsed configs are valid");
    }
});
