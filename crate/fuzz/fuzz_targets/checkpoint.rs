#![no_main]

use facenet::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let bytes = c.to_bytes().expect("decoded checkpoint re-encodes");
        assert_eq!(Checkpoint::from_bytes(&bytes).expect("round trip"), c);
    }
});
