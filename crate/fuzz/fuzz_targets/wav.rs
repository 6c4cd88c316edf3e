#![no_main]

use avmae::audio::compute_log_mel;
use avmae::data::decode_wav;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = decode_wav(data) {
        // Keep the feature pass cheap on long inputs.
        if w.samples().len() <= 16_000 {
            let _ = compute_log_mel(&w);
        }
    }
});
