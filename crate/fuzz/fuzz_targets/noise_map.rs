#![no_main]

use blemish_core::artifact::noise_map::NoiseMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = NoiseMap::parse(data) {
        assert_eq!(map.to_bytes(), data);
    }
});
