#![no_main]

use facenet::synth::parse_flare_gt;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_flare_gt(text);
});
