#![no_main]

use facenet::data::{decode_spectrum, Spectrum};
use facenet::pseudo_label::compute_delta_raw;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&which, bytes)) = data.split_first() else { return };
    let spectrum = Spectrum::ALL[which as usize % 3];
    if let Ok(img) = decode_spectrum(bytes, spectrum) {
        let raw = match spectrum {
            Spectrum::Rgb => img.to_rgb8().into_raw(),
            _ => img.to_luma8().into_raw(),
        };
        if let Ok(d) = compute_delta_raw(&raw, spectrum.channels()) {
            assert!((0.0..=1.0).contains(&d));
        }
    }
});
