#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::report::{parse_summary, render_table, TableFormat};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(summary) = parse_summary(text) {
        let _ = render_table(&summary, TableFormat::Csv);
        let _ = render_table(&summary, TableFormat::Markdown);
    }
});
