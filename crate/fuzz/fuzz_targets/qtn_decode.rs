#![no_main]

use libfuzzer_sys::fuzz_target;
use qtk_core::qtn;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = qtn::decode(data) {
        // anything that decodes must survive a round trip
        let bytes = qtn::encode(&t).expect("decoded tensor encodes");
        let back = qtn::decode(&bytes).expect("encoded tensor decodes");
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
