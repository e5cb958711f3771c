//! Heatmap overlays of predicted flare masks.

use image::{imageops, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel mean of sample `index` of a B×C×H×W mask, as an H×W map.
pub fn mask_plane(mask: &Tensor, index: usize) -> Result<ImageBuffer<Luma<f32>, Vec<f32>>> {
    let (b, c, h, w) = mask.dims4()?;
    if index >= b {
        return Err(Error::shape("mask_plane", format!("sample {index} of {b}")));
    }
    let plane = h * w;
    let data = &mask.data()[index * c * plane..(index + 1) * c * plane];
    let mean: Vec<f32> = (0..plane)
        .map(|p| ((0..c).map(|ch| data[ch * plane + p]).sum::<f64>() / c as f64) as f32)
        .collect();
    ImageBuffer::from_raw(w as u32, h as u32, mean).ok_or_else(|| Error::shape("mask_plane", "buffer size"))
}

pub fn grey(img: &RgbImage) -> GrayImage {
    imageops::grayscale(img)
}

/// Blue (0) → green (0.5) → red (1).
fn colour(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        let t = v * 2.0;
        [0.0, 255.0 * t, 255.0 * (1.0 - t)]
    } else {
        let t = (v - 0.5) * 2.0;
        [255.0 * t, 255.0 * (1.0 - t), 0.0]
    }
}

/// Mask upsampled bilinearly to the image size and blended at `alpha` over
/// the grey version of `base`.
pub fn overlay(base: &GrayImage, plane: &ImageBuffer<Luma<f32>, Vec<f32>>, alpha: f32) -> RgbImage {
    let (w, h) = base.dimensions();
    let up = imageops::resize(plane, w, h, imageops::FilterType::Triangle);
    RgbImage::from_fn(w, h, |x, y| {
        let g = base.get_pixel(x, y)[0] as f32;
        let c = colour(up.get_pixel(x, y)[0]);
        Rgb(c.map(|ch| (alpha * ch + (1.0 - alpha) * g).round().clamp(0.0, 255.0) as u8))
    })
}
