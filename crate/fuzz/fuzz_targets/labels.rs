#![no_main]

use avmae::data::LabelField;
use avmae::finetune::parse_heads;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = LabelField::parse(text);
        let _ = parse_heads(text);
    }
});
