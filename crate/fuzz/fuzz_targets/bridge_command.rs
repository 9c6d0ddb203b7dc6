#![no_main]

use gondola_core::controller::parse_bridge_command;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_bridge_command(text);
    }
});
