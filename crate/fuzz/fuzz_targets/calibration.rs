#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::camera::{calibration_to_json, parse_calibration};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cam) = parse_calibration(text) {
        // Anything accepted must survive its own serialization.
        let again = parse_calibration(&calibration_to_json(&cam)).expect("re-parse");
        assert_eq!(cam, again);
    }
});
