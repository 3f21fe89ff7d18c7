#![no_main]

use libfuzzer_sys::fuzz_target;
use sfda_core::data::{decode_dataset, encode_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        let again = encode_dataset(&ds);
        assert_eq!(decode_dataset(&again).expect("re-encoded dataset decodes"), ds);
    }
});
