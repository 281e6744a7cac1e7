#![no_main]

use libfuzzer_sys::fuzz_target;
use wft_core::io::{decode_model, encode_model};

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(m) = decode_model(data) {
        let again = encode_model(&m).expect("decoded model re-encodes");
        assert_eq!(again, data);
    }
});
