#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::evalsim::{format_records, parse_records};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(records) = parse_records(text) {
        let again = parse_records(&format_records(&records)).expect("formatted records re-parse");
        assert_eq!(records.len(), again.len());
        for (a, b) in records.iter().zip(&again) {
            assert_eq!(a.cell, b.cell);
            assert_eq!(a.frames, b.frames);
        }
    }
});
