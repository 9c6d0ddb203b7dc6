#![no_main]

use gondola_core::config::RigConfig;
use libfuzzer_sys::fuzz_target;

// A config that loads must survive a save and reload.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rig) = RigConfig::from_toml(text) {
            RigConfig::from_toml(&rig.to_toml()).expect("saved config reloads");
        }
    }
});
