#![no_main]

use avmae::config::RunConfig;
use avmae::train::Phase;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for phase in [Phase::Pretrain, Phase::Finetune] {
            if let Ok(cfg) = RunConfig::parse(text, phase, None) {
                // The dump must parse back to the same settings.
                let again = RunConfig::parse(&cfg.dump(), phase, None).expect("dump parses");
                assert_eq!(again.dump(), cfg.dump());
            }
        }
    }
});
