#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::compositor::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = DatasetManifest::parse(text) {
        let counts = m.class_counts();
        assert_eq!(counts.values().sum::<usize>(), m.entries.len());
    }
});
