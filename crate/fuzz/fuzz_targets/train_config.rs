#![no_main]

use facenet::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = TrainConfig::parse(text) {
        let back = TrainConfig::parse(&c.to_kv_string()).expect("serialised config reparses");
        assert_eq!(back, c);
    }
});
