#![no_main]

use blemish_core::artifact::{apply_artifact, ArtifactParams, ArtifactSpec};
use blemish_core::ImageTensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(spec) = ArtifactSpec::from_json(s) else { return };
    // Keep external files out of the loop.
    if matches!(spec.params, ArtifactParams::ExternalNoise(_)) {
        return;
    }
    let img = ImageTensor::filled(32, 32, [0.5, 0.5, 0.5]).unwrap();
    if let Ok(out) = apply_artifact(&img, &spec, 7) {
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
