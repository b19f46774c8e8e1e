#![no_main]

use libfuzzer_sys::fuzz_target;
use tsdistill::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::parse(text) else {
        return;
    };
    let _ = cfg.validate();
    let again = RunConfig::parse(&cfg.to_text()).expect("serialized config parses");
    assert_eq!(again.to_text(), cfg.to_text());
});
