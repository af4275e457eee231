#![no_main]

use hetfx::simlab::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Scenario::from_toml_str(text) {
        s.validate().expect("parsed scenarios are valid");
        let _ = s.schema();
        let _ = s.mean_effect();
    }
});
