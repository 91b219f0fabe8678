#![no_main]

use libfuzzer_sys::fuzz_target;
use signpatch::raster::{decode_png, encode_png, Image};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        // Lossless path: decode, encode, decode is a fixed point.
        if (img.width() as u64) * (img.height() as u64) <= 1 << 20 {
            let bytes = encode_png(&img).expect("encode");
            assert_eq!(decode_png(&bytes).expect("re-decode"), img);
            let _ = Image::from_rgb8(&img);
        }
    }
});
