#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::adapters::wire::{decode_image, parse_detect_reply, parse_grad_reply, parse_probe_reply};

// Replies from an untrusted detector process, one line each.
fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_probe_reply(line);
    if let Ok(dets) = parse_detect_reply(line) {
        for d in dets {
            assert!((0.0..=1.0).contains(&d.confidence));
        }
    }
    if let Ok(g) = parse_grad_reply(line, 8, 6) {
        assert_eq!((g.width(), g.height()), (8, 6));
    }
    let _ = decode_image(line);
});
