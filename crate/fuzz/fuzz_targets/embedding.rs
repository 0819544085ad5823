#![no_main]

use blemish_core::inversion::{encode_vector, parse_vector, BankIndex, EmbeddingSidecar};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = parse_vector(data) {
        assert_eq!(encode_vector(&v), data);
    }
    let _ = serde_json::from_slice::<EmbeddingSidecar>(data);
    let _ = serde_json::from_slice::<BankIndex>(data);
});
