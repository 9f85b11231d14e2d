#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::quantizer::{format_unit_corpus, parse_unit_corpus};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(seqs) = parse_unit_corpus(text, "fuzz") else { return };
    let out = format_unit_corpus(seqs.iter().map(|s| (s.source_id.as_str(), s.units.as_slice())));
    assert_eq!(parse_unit_corpus(&out, "fuzz").expect("formatted corpus parses"), seqs);
});
