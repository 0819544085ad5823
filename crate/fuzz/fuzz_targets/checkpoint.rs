#![no_main]

use blemish_core::diffusion::ModelCheckpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = ModelCheckpoint::parse(data) {
        let again = ModelCheckpoint::parse(&ckpt.to_bytes()).expect("re-encoded checkpoint parses");
        assert_eq!(again.params.hash(), ckpt.params.hash());
    }
});
