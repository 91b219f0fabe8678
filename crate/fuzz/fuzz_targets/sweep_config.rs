#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::evalsim::SweepConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = SweepConfig::from_json(text) {
        if cfg.validate().is_ok() {
            let _ = cfg.patch_types();
            let _ = cfg.cell_count();
        }
        let again = SweepConfig::from_json(&cfg.to_json()).expect("re-parse");
        assert_eq!(cfg.to_json(), again.to_json());
    }
});
