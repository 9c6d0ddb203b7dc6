#![no_main]

use gondola_core::controller::{estimate_anchors, parse_observations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(obs) = parse_observations(text) {
            if obs.len() <= 64 {
                let _ = estimate_anchors(&obs);
            }
        }
    }
});
