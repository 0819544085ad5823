#![no_main]

use blemish_core::embed::FeatureMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = FeatureMatrix::parse(data) {
        for i in 0..m.rows() {
            assert_eq!(m.row(i).len(), m.d_feat);
        }
    }
});
