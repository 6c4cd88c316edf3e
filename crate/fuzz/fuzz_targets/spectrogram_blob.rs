#![no_main]

use avmae::data::{decode_spectrogram_blob, encode_spectrogram_blob};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(values) = decode_spectrogram_blob(data) {
        assert_eq!(encode_spectrogram_blob(&values), data);
    }
});
