//! Histogram flare statistic and the pseudo-labels derived from it.

use std::path::Path;

use image::{ImageBuffer, Pixel};

use crate::data::SpectralTriplet;
use crate::error::{Error, Result};

/// Lowest pixel value counted as near-saturated.
pub const BRIGHT_MIN: u8 = 250;

/// Default fraction of near-saturated pixels above which an image is flared.
pub const DEFAULT_BAR: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlarePseudoLabel {
    pub delta: f64,
    pub is_flare: bool,
    pub bar: f64,
}

impl FlarePseudoLabel {
    pub fn new(delta: f64, bar: f64) -> Self {
        FlarePseudoLabel {
            delta,
            is_flare: flare_label(delta, bar),
            bar,
        }
    }

    /// Class index for the two-way flare classifier: 1 = flared.
    pub fn class(&self) -> usize {
        usize::from(self.is_flare)
    }
}

/// Fraction of pixels with value in `[250, 255]` over interleaved `u8` data.
/// Multi-channel pixels are reduced by their channel maximum first.
pub fn compute_delta_raw(pixels: &[u8], channels: usize) -> Result<f64> {
    if channels == 0 || pixels.is_empty() || pixels.len() % channels != 0 {
        return Err(Error::Empty("image"));
    }
    let total = pixels.len() / channels;
    let bright = pixels
        .chunks_exact(channels)
        .filter(|px| px.iter().copied().max().unwrap_or(0) >= BRIGHT_MIN)
        .count();
    Ok(bright as f64 / total as f64)
}

pub fn compute_delta<P>(image: &ImageBuffer<P, Vec<u8>>) -> Result<f64>
where
    P: Pixel<Subpixel = u8>,
{
    compute_delta_raw(image.as_raw(), P::CHANNEL_COUNT as usize)
}

/// Strictly greater than the bar; `delta == bar` is not a flare.
pub fn flare_label(delta: f64, bar: f64) -> bool {
    delta > bar
}

/// Per-sample gate: flared if either flare-susceptible spectrum is.
pub fn sample_flare_flag(rgb_delta: f64, ni_delta: f64, bar: f64) -> bool {
    flare_label(rgb_delta, bar) || flare_label(ni_delta, bar)
}

/// Pseudo-labels of one triplet's RGB and NI views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePseudoLabels {
    pub rgb: FlarePseudoLabel,
    pub ni: FlarePseudoLabel,
}

impl SamplePseudoLabels {
    pub fn of(triplet: &SpectralTriplet, bar: f64) -> Result<Self> {
        Ok(SamplePseudoLabels {
            rgb: FlarePseudoLabel::new(compute_delta(&triplet.rgb)?, bar),
            ni: FlarePseudoLabel::new(compute_delta(&triplet.ni)?, bar),
        })
    }

    pub fn is_flare(&self) -> bool {
        sample_flare_flag(self.rgb.delta, self.ni.delta, self.rgb.bar)
    }
}

/// Write `sample_id,delta_rgb,delta_ni,is_flare`, one row per distinct sample.
pub fn write_pseudo_labels(path: &Path, triplets: &[SpectralTriplet], bar: f64) -> Result<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut rows = Vec::new();
    for t in triplets {
        if !seen.insert(t.sample_id.as_str()) {
            continue;
        }
        let l = SamplePseudoLabels::of(t, bar)?;
        rows.push(vec![
            t.sample_id.clone(),
            format!("{}", l.rgb.delta),
            format!("{}", l.ni.delta),
            (if l.is_flare() { "1" } else { "0" }).to_string(),
        ]);
    }
    let n = rows.len();
    let file = std::fs::File::create(path)?;
    crate::data::write_csv(file, &["sample_id", "delta_rgb", "delta_ni", "is_flare"], rows)?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};
    use proptest::prelude::*;

    #[test]
    fn all_dark_and_all_bright() {
        assert_eq!(compute_delta(&GrayImage::new(16, 16)).unwrap(), 0.0);
        let white = GrayImage::from_pixel(16, 16, Luma([255]));
        assert_eq!(compute_delta(&white).unwrap(), 1.0);
    }

    #[test]
    fn thirteen_of_sixty_four() {
        let mut img = GrayImage::new(8, 8);
        for i in 0..13u32 {
            img.put_pixel(i % 8, i / 8 * 3, Luma([252]));
        }
        // counting oracle
        let count = img.pixels().filter(|p| (250..=255).contains(&p.0[0])).count();
        assert_eq!(count, 13);
        assert_eq!(compute_delta(&img).unwrap(), 13.0 / 64.0);
        assert_eq!(compute_delta(&img).unwrap(), 0.203125);
    }

    #[test]
    fn rgb_uses_channel_maximum() {
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(0, 0, Rgb([10, 251, 3]));
        img.put_pixel(1, 0, Rgb([249, 249, 249]));
        assert_eq!(compute_delta(&img).unwrap(), 0.25);
    }

    #[test]
    fn empty_image_is_an_error() {
        assert!(compute_delta(&GrayImage::new(0, 0)).is_err());
    }

    #[test]
    fn labels_at_and_around_the_bar() {
        assert!(!flare_label(0.05, 0.10));
        assert!(flare_label(0.20, 0.10));
        assert!(!flare_label(0.10, 0.10));
        assert!(!sample_flare_flag(0.0, 0.0, 0.10));
        assert!(sample_flare_flag(0.2, 0.0, 0.10));
        assert!(sample_flare_flag(0.0, 0.15, 0.10));
    }

    proptest! {
        #[test]
        fn delta_ignores_pixel_order(mut px in prop::collection::vec(any::<u8>(), 1..200), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let before = compute_delta_raw(&px, 1).unwrap();
            px.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, compute_delta_raw(&px, 1).unwrap());
        }

        #[test]
        fn raising_a_pixel_never_lowers_delta(px in prop::collection::vec(any::<u8>(), 1..200), idx in any::<prop::sample::Index>(), bump in any::<u8>()) {
            let before = compute_delta_raw(&px, 1).unwrap();
            let mut raised = px.clone();
            let i = idx.index(raised.len());
            raised[i] = raised[i].saturating_add(bump);
            prop_assert!(compute_delta_raw(&raised, 1).unwrap() >= before);
        }

        #[test]
        fn label_is_monotone_in_delta(a in 0.0f64..=1.0, b in 0.0f64..=1.0, bar in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(flare_label(lo, bar) <= flare_label(hi, bar));
        }
    }
}
