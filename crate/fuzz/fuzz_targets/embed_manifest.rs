#![no_main]

use blemish_core::embed::EmbedManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = EmbedManifest::parse(s);
    }
});
