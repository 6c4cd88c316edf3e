#![no_main]

use avmae::data::{decode_video_blob, encode_video_blob};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = decode_video_blob(data) {
        assert_eq!(encode_video_blob(&frames), data);
    }
});
