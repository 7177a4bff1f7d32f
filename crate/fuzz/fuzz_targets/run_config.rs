#![no_main]

use libfuzzer_sys::fuzz_target;
use transfer_lab_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let resolved = cfg.to_text();
        let again = RunConfig::parse(&resolved).expect("resolved config parses");
        assert_eq!(again.to_text(), resolved);
    }
});
