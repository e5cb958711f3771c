#![no_main]

use facenet::data::{parse_manifest, DatasetSplit};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_manifest(text) {
        if let Ok(split) = DatasetSplit::from_rows(&rows) {
            for q in &split.query_samples {
                assert!(split.gallery_samples.contains(q));
            }
        }
    }
});
