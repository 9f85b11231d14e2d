#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::corpus::{ScoredPairSet, Split};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(set) = ScoredPairSet::from_tsv(text, Split::Dev, "fuzz") else { return };
    assert!(set.pairs.iter().all(|p| (0.0..=5.0).contains(&p.score)));
    let again = ScoredPairSet::from_tsv(&set.to_tsv(), Split::Dev, "fuzz").expect("written pairs parse");
    assert_eq!(again, set);
});
