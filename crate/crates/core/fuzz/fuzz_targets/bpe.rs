#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::tokenizer::BpeModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = BpeModel::from_json(text) else { return };
    let again = BpeModel::from_json(&model.to_json()).expect("written model parses");
    assert_eq!(again.to_json(), model.to_json());
    let units: Vec<u32> = model.alphabet().iter().copied().take(8).collect();
    if units.is_empty() {
        return;
    }
    let tokens = model.encode(&units);
    let decoded = model.decode(&tokens).expect("own encoding decodes");
    assert_eq!(decoded, units.iter().map(|&u| u as i64).collect::<Vec<_>>());
});
