#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::index::EmbeddingIndex;

fuzz_target!(|data: &[u8]| {
    let Ok(idx) = EmbeddingIndex::from_bytes(data) else { return };
    let bytes = idx.to_bytes();
    assert_eq!(EmbeddingIndex::from_bytes(&bytes).expect("re-encoded index parses"), idx);
    if let Some(id) = idx.ids().first() {
        let _ = idx.search_id(id, 1);
    }
});
