#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::quantizer::Codebook;

fuzz_target!(|data: &[u8]| {
    if let Ok(cb) = Codebook::from_bytes(data) {
        assert!(cb.k() > 0);
        let again = Codebook::from_bytes(&cb.to_bytes()).expect("re-encoded codebook parses");
        assert_eq!(again.to_bytes(), cb.to_bytes());
    }
});
