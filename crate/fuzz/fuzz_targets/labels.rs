#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::compositor::parse_labels;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(boxes) = parse_labels(text) {
        for b in &boxes {
            assert!(b.w > 0.0 && b.h > 0.0);
            assert!(b.cx.is_finite() && b.cy.is_finite());
        }
    }
});
