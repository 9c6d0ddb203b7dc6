#![no_main]

use gondola_core::protocol::{decode, encode};
use libfuzzer_sys::fuzz_target;

// Every accepted line has exactly one spelling.
fuzz_target!(|data: &[u8]| {
    if let Ok(cmd) = decode(data) {
        let body = data.strip_suffix(b"\n").unwrap_or(data);
        let body = body.strip_suffix(b"\r").unwrap_or(body);
        let encoded = encode(&cmd);
        assert_eq!(&encoded[..encoded.len() - 1], body);
        assert_eq!(decode(&encoded).unwrap(), cmd);
    }
});
