#![no_main]

use libfuzzer_sys::fuzz_target;
use unitsem_core::distill::StudentModel;
use unitsem_core::nn::Checkpoint;
use unitsem_core::teachers::{MlmModel, Teacher};
use unitsem_core::wavembed::WavEmbedModel;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::from_bytes(data) else { return };
    let bytes = ck.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint parses").to_bytes(), bytes);
    // Model loaders must reject bad configs or shapes without panicking.
    let _ = WavEmbedModel::from_checkpoint(&ck);
    let _ = StudentModel::from_checkpoint(&ck);
    let _ = Teacher::from_checkpoint(&ck);
    let _ = MlmModel::from_checkpoint(&ck);
});
