#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = sfda_tensor::decode_checkpoint(data) {
        // anything that decodes must re-encode to something that decodes the same way
        let again = sfda_tensor::encode_checkpoint(&ck.params, &ck.meta);
        let back = sfda_tensor::decode_checkpoint(&again).expect("re-encoded checkpoint decodes");
        assert_eq!(back.params.len(), ck.params.len());
        let _ = sfda_core::model::Model::<f32>::from_checkpoint(ck, None);
    }
});
