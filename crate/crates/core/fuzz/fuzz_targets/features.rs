#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::corpus::FeatureSequence;

fuzz_target!(|data: &[u8]| {
    if let Ok(fs) = FeatureSequence::from_bytes(data) {
        assert_eq!(fs.data().len(), fs.n_frames() * fs.dim());
        let again = FeatureSequence::from_bytes(&fs.to_bytes()).expect("re-encoded features parse");
        assert_eq!(again.to_bytes(), fs.to_bytes());
    }
});
