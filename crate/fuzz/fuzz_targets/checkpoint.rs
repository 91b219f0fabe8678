#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::optimizer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(c) = Checkpoint::parse(text) {
        let _ = c.config.validate();
        let _ = Checkpoint::parse(&c.to_json()).expect("re-parse");
    }
});
