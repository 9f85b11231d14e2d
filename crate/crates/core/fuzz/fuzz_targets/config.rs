#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = PipelineConfig::from_toml(text) else { return };
    if let Ok(resolved) = cfg.resolve(None) {
        let back = PipelineConfig::from_toml(&resolved.to_toml()).expect("written config parses");
        assert_eq!(back, resolved);
    }
});
