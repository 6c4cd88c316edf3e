#![no_main]

use avmae::checkpoint::{decode_blob, Manifest};
use avmae::model::ArchConfig;
use libfuzzer_sys::fuzz_target;

// Input: manifest text, a NUL byte, then the blob of the first tensor.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let Ok(manifest) = Manifest::parse(text) else {
        return;
    };
    let _ = ArchConfig::from_kv(&manifest.arch);
    if let Some(entry) = manifest.tensors.first() {
        let blob = data.get(split + 1..).unwrap_or_default();
        let _ = decode_blob::<f32>(entry, blob);
        let _ = decode_blob::<f64>(entry, blob);
    }
});
