//! Procedural multi-spectral vehicle dataset with injected flares.
//!
//! Every identity gets a template (body colour and layout, near-infrared
//! reflectance, heat signature). Each sample re-renders the template with pose,
//! scale, brightness and background jitter. A flare, when drawn, is an additive
//! radial Gaussian composited onto RGB and, at 0.8× intensity, onto NI. The
//! thermal view is never touched.

use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvFile;
use crate::data::{self, spectrum_path, ManifestRow, Spectrum, Split, MANIFEST_FILE};
use crate::error::{Error, Result};

pub const FLARE_GT_FILE: &str = "flare_gt.csv";

/// Template pixels never exceed this, so only flares reach the
/// near-saturated band.
pub const TEMPLATE_MAX: f64 = 240.0;

/// Flare amplitude relative to `flare_peak`: the saturated core then reaches
/// about 1.68 radii from the centre.
pub const FLARE_GAIN: f64 = 4.0;

pub const NI_FLARE_SCALE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    /// `(height, width)` in pixels.
    pub image_size: (u32, u32),
    pub flare_probability: f64,
    /// `(min, max)` flare radius in pixels.
    pub flare_radius_range: (f64, f64),
    pub flare_peak: u8,
    pub rng_seed: u64,
    pub num_cameras: u32,
    /// Identities `0..train_identities` go to the train split, the rest to
    /// gallery/query.
    pub train_identities: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 40,
            samples_per_identity: 6,
            image_size: (256, 128),
            flare_probability: 0.5,
            flare_radius_range: (26.0, 38.0),
            flare_peak: 255,
            rng_seed: 0,
            num_cameras: 2,
            train_identities: 20,
        }
    }
}

pub const SYNTH_KEYS: &[&str] = &[
    "num_identities",
    "samples_per_identity",
    "image_height",
    "image_width",
    "flare_probability",
    "flare_radius_min",
    "flare_radius_max",
    "flare_peak",
    "rng_seed",
    "num_cameras",
    "train_identities",
];

impl SynthConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(SYNTH_KEYS)?;
        let d = SynthConfig::default();
        let num_identities = kv.get("num_identities")?.unwrap_or(d.num_identities);
        let c = SynthConfig {
            num_identities,
            samples_per_identity: kv.get("samples_per_identity")?.unwrap_or(d.samples_per_identity),
            image_size: (
                kv.get("image_height")?.unwrap_or(d.image_size.0),
                kv.get("image_width")?.unwrap_or(d.image_size.1),
            ),
            flare_probability: kv.get("flare_probability")?.unwrap_or(d.flare_probability),
            flare_radius_range: (
                kv.get("flare_radius_min")?.unwrap_or(d.flare_radius_range.0),
                kv.get("flare_radius_max")?.unwrap_or(d.flare_radius_range.1),
            ),
            flare_peak: kv.get("flare_peak")?.unwrap_or(d.flare_peak),
            rng_seed: kv.get("rng_seed")?.unwrap_or(d.rng_seed),
            num_cameras: kv.get("num_cameras")?.unwrap_or(d.num_cameras),
            train_identities: kv
                .get("train_identities")?
                .unwrap_or(num_identities / 2),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidValue(m.to_string()));
        if self.num_identities == 0 {
            return bad("num_identities must be positive");
        }
        if self.samples_per_identity == 0 {
            return bad("samples_per_identity must be positive");
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return bad("image_size must be at least 8x8");
        }
        if !(0.0..=1.0).contains(&self.flare_probability) {
            return bad("flare_probability must lie in [0, 1]");
        }
        let (lo, hi) = self.flare_radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("flare radius range must be positive and ordered");
        }
        if self.num_cameras == 0 {
            return bad("num_cameras must be positive");
        }
        if self.train_identities > self.num_identities {
            return bad("train_identities exceeds num_identities");
        }
        Ok(())
    }

    pub fn height(&self) -> u32 {
        self.image_size.0
    }

    pub fn width(&self) -> u32 {
        self.image_size.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlareGroundTruth {
    pub sample_id: String,
    pub flare_applied_rgb: bool,
    pub flare_applied_ni: bool,
    pub flare_center: (f64, f64),
    pub flare_radius: f64,
}

/// One rendered sample before it is written to disk.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub sample_id: String,
    pub identity: u32,
    pub camera: u32,
    pub rgb: RgbImage,
    pub ni: GrayImage,
    pub ti: GrayImage,
    pub flare: Option<FlareGroundTruth>,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream per `(purpose, identity, sample)` so that changing one
/// draw (e.g. the flare) never shifts another.
fn stream(seed: u64, purpose: u64, identity: u64, sample: u64) -> ChaCha8Rng {
    let s = mix(mix(mix(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15)) ^ identity) ^ sample.wrapping_add(0x51));
    ChaCha8Rng::seed_from_u64(s)
}

const STREAM_TEMPLATE: u64 = 1;
const STREAM_POSE: u64 = 2;
const STREAM_FLARE: u64 = 3;

struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }
}

struct Template {
    body: Rect,
    body_rgb: [f64; 3],
    cabin: Rect,
    cabin_rgb: [f64; 3],
    stripe: Option<(Rect, [f64; 3])>,
    lamps: [Rect; 2],
    wheels: [Rect; 2],
    ni_body: f64,
    ni_cabin: f64,
    heat_body: f64,
    heat_spot: (f64, f64, f64),
}

impl Template {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let color = |rng: &mut ChaCha8Rng| {
            [rng.gen_range(30.0..220.0), rng.gen_range(30.0..220.0), rng.gen_range(30.0..220.0)]
        };
        let bw = rng.gen_range(0.55..0.85);
        let bh = rng.gen_range(0.40..0.65);
        let bx = (1.0 - bw) / 2.0;
        let by = (1.0 - bh) / 2.0 + rng.gen_range(-0.05..0.05);
        let body = Rect {
            x0: bx,
            y0: by,
            x1: bx + bw,
            y1: by + bh,
        };
        let cabin_frac = rng.gen_range(0.25..0.45);
        let inset = rng.gen_range(0.05..0.2) * bw;
        let cabin = Rect {
            x0: bx + inset,
            y0: by,
            x1: bx + bw - inset,
            y1: by + bh * cabin_frac,
        };
        let body_rgb = color(rng);
        let cabin_rgb = [rng.gen_range(20.0..90.0); 3];
        let stripe = if rng.gen_bool(0.6) {
            let sy = by + bh * rng.gen_range(0.5..0.8);
            Some((
                Rect {
                    x0: bx,
                    y0: sy,
                    x1: bx + bw,
                    y1: sy + bh * rng.gen_range(0.05..0.15),
                },
                color(rng),
            ))
        } else {
            None
        };
        let lamp_w = bw * rng.gen_range(0.1..0.2);
        let lamp_y = by + bh * rng.gen_range(0.55..0.75);
        let lamp_h = bh * 0.1;
        let lamps = [
            Rect {
                x0: bx + 0.03 * bw,
                y0: lamp_y,
                x1: bx + 0.03 * bw + lamp_w,
                y1: lamp_y + lamp_h,
            },
            Rect {
                x0: bx + 0.97 * bw - lamp_w,
                y0: lamp_y,
                x1: bx + 0.97 * bw,
                y1: lamp_y + lamp_h,
            },
        ];
        let wheel_w = bw * 0.18;
        let wheels = [
            Rect {
                x0: bx + 0.08 * bw,
                y0: by + bh,
                x1: bx + 0.08 * bw + wheel_w,
                y1: by + bh + 0.06,
            },
            Rect {
                x0: bx + 0.92 * bw - wheel_w,
                y0: by + bh,
                x1: bx + 0.92 * bw,
                y1: by + bh + 0.06,
            },
        ];
        Template {
            body,
            body_rgb,
            cabin,
            cabin_rgb,
            stripe,
            lamps,
            wheels,
            ni_body: rng.gen_range(60.0..220.0),
            ni_cabin: rng.gen_range(20.0..80.0),
            heat_body: rng.gen_range(90.0..150.0),
            heat_spot: (
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.4..0.8),
                rng.gen_range(170.0..230.0),
            ),
        }
    }

    /// `(rgb, ni, heat)` at template coordinates, or `None` for background.
    fn sample(&self, u: f64, v: f64) -> Option<([f64; 3], f64, f64)> {
        if self.wheels.iter().any(|w| w.contains(u, v)) {
            return Some(([25.0; 3], 30.0, 150.0));
        }
        if !self.body.contains(u, v) {
            return None;
        }
        let heat = {
            let (hx, hy, hv) = self.heat_spot;
            let bu = (u - self.body.x0) / (self.body.x1 - self.body.x0);
            let bv = (v - self.body.y0) / (self.body.y1 - self.body.y0);
            let d2 = (bu - hx).powi(2) + (bv - hy).powi(2);
            self.heat_body + (hv - self.heat_body) * (-d2 / 0.03).exp()
        };
        if self.lamps.iter().any(|l| l.contains(u, v)) {
            return Some(([220.0, 50.0, 40.0], 200.0, heat + 20.0));
        }
        if self.cabin.contains(u, v) {
            return Some((self.cabin_rgb, self.ni_cabin, heat - 20.0));
        }
        if let Some((r, c)) = &self.stripe {
            if r.contains(u, v) {
                return Some((*c, self.ni_body * 0.6, heat));
            }
        }
        Some((self.body_rgb, self.ni_body, heat))
    }
}

fn clamp_u8(v: f64, max: f64) -> u8 {
    v.round().clamp(0.0, max) as u8
}

/// Additive Gaussian flare saturating at `peak`; never darkens a pixel.
fn flare_value(base: u8, gain: f64, peak: u8) -> u8 {
    let lifted = (base as f64 + gain).min(peak as f64).round() as u8;
    lifted.max(base)
}

pub fn sample_id(identity: usize, k: usize) -> String {
    format!("v{identity:04}_{k:03}")
}

/// Render sample `k` of `identity` in memory.
pub fn render_sample(config: &SynthConfig, identity: usize, k: usize) -> RenderedSample {
    let (h, w) = (config.height(), config.width());
    let (wf, hf) = (w as f64, h as f64);
    let template = Template::new(&mut stream(config.rng_seed, STREAM_TEMPLATE, identity as u64, 0));
    let camera = (k as u32) % config.num_cameras;

    let mut pose = stream(config.rng_seed, STREAM_POSE, identity as u64, k as u64);
    let dx = pose.gen_range(-0.08..0.08);
    let dy = pose.gen_range(-0.06..0.06);
    let scale = pose.gen_range(0.9..1.1);
    let gain = pose.gen_range(0.85..1.1);
    let cam_level = 50.0 + 50.0 * camera as f64 / config.num_cameras.max(1) as f64;
    let bg_rgb = [
        cam_level + pose.gen_range(-15.0..15.0),
        cam_level + pose.gen_range(-15.0..15.0),
        cam_level + pose.gen_range(-15.0..15.0),
    ];
    let bg_heat = pose.gen_range(35.0..60.0);

    let mut rgb = RgbImage::new(w, h);
    let mut ni = GrayImage::new(w, h);
    let mut ti = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let u = ((x as f64 + 0.5) / wf - 0.5 - dx) / scale + 0.5;
            let v = ((y as f64 + 0.5) / hf - 0.5 - dy) / scale + 0.5;
            let noise = pose.gen_range(-6.0..6.0);
            let (c, n, t) = match template.sample(u, v) {
                Some((c, n, t)) => ([c[0] * gain, c[1] * gain, c[2] * gain], n * gain, t),
                None => (bg_rgb, 0.5 * (bg_rgb[0] + bg_rgb[1] + bg_rgb[2]) / 3.0 + 20.0, bg_heat),
            };
            rgb.put_pixel(
                x,
                y,
                Rgb([
                    clamp_u8(c[0] + noise, TEMPLATE_MAX),
                    clamp_u8(c[1] + noise, TEMPLATE_MAX),
                    clamp_u8(c[2] + noise, TEMPLATE_MAX),
                ]),
            );
            ni.put_pixel(x, y, Luma([clamp_u8(n + noise, TEMPLATE_MAX)]));
            ti.put_pixel(x, y, Luma([clamp_u8(t, TEMPLATE_MAX)]));
        }
    }
    let ti = imageops::blur(&ti, (wf / 40.0).max(0.8) as f32);

    let sample_id = sample_id(identity, k);
    let mut fr = stream(config.rng_seed, STREAM_FLARE, identity as u64, k as u64);
    let flare = if fr.gen_bool(config.flare_probability) {
        let (rmin, rmax) = config.flare_radius_range;
        let radius = if rmax > rmin { fr.gen_range(rmin..=rmax) } else { rmin };
        let center_in = |extent: f64, rng: &mut ChaCha8Rng| {
            if 2.0 * radius >= extent {
                extent / 2.0
            } else {
                rng.gen_range(radius..=extent - radius)
            }
        };
        let cx = center_in(wf, &mut fr);
        let cy = center_in(hf, &mut fr);
        let amp = FLARE_GAIN * config.flare_peak as f64;
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let g = (-d2 / (2.0 * radius * radius)).exp();
                let px = rgb.get_pixel_mut(x, y);
                for ch in px.0.iter_mut() {
                    *ch = flare_value(*ch, amp * g, config.flare_peak);
                }
                let pn = ni.get_pixel_mut(x, y);
                pn.0[0] = flare_value(pn.0[0], NI_FLARE_SCALE * amp * g, config.flare_peak);
            }
        }
        Some(FlareGroundTruth {
            sample_id: sample_id.clone(),
            flare_applied_rgb: true,
            flare_applied_ni: true,
            flare_center: (cx, cy),
            flare_radius: radius,
        })
    } else {
        None
    };

    RenderedSample {
        sample_id,
        identity: identity as u32,
        camera,
        rgb,
        ni,
        ti,
        flare,
    }
}

fn split_rows(config: &SynthConfig) -> Vec<ManifestRow> {
    let mut rows = Vec::new();
    for id in 0..config.num_identities {
        let train = id < config.train_identities;
        let mut seen_cameras = Vec::new();
        for k in 0..config.samples_per_identity {
            let camera = (k as u32) % config.num_cameras;
            let base = ManifestRow {
                sample_id: sample_id(id, k),
                identity: id as u32,
                camera,
                split: if train { Split::Train } else { Split::Gallery },
            };
            let is_query = !train && !seen_cameras.contains(&camera);
            seen_cameras.push(camera);
            rows.push(base.clone());
            if is_query {
                rows.push(ManifestRow {
                    split: Split::Query,
                    ..base
                });
            }
        }
    }
    rows
}

fn write_png<P: image::PixelWithColorType<Subpixel = u8>>(
    img: &image::ImageBuffer<P, Vec<u8>>,
    path: &Path,
) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Write a complete dataset under `out_dir` and return the manifest path and
/// the ground truth of every injected flare.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<(PathBuf, Vec<FlareGroundTruth>)> {
    config.validate()?;
    for s in Spectrum::ALL {
        std::fs::create_dir_all(out_dir.join(s.as_str()))?;
    }
    let mut truths = Vec::new();
    for id in 0..config.num_identities {
        for k in 0..config.samples_per_identity {
            let r = render_sample(config, id, k);
            write_png(&r.rgb, &spectrum_path(out_dir, Spectrum::Rgb, &r.sample_id))?;
            write_png(&r.ni, &spectrum_path(out_dir, Spectrum::Ni, &r.sample_id))?;
            write_png(&r.ti, &spectrum_path(out_dir, Spectrum::Ti, &r.sample_id))?;
            truths.extend(r.flare);
        }
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    data::write_manifest(&manifest, &split_rows(config))?;
    write_flare_gt(&out_dir.join(FLARE_GT_FILE), &truths)?;
    Ok((manifest, truths))
}

pub const FLARE_GT_HEADER: [&str; 6] = ["sample_id", "flare_rgb", "flare_ni", "cx", "cy", "radius"];

pub fn write_flare_gt(path: &Path, truths: &[FlareGroundTruth]) -> Result<()> {
    let b = |v: bool| (if v { "1" } else { "0" }).to_string();
    let rows = truths.iter().map(|t| {
        vec![
            t.sample_id.clone(),
            b(t.flare_applied_rgb),
            b(t.flare_applied_ni),
            format!("{}", t.flare_center.0),
            format!("{}", t.flare_center.1),
            format!("{}", t.flare_radius),
        ]
    });
    data::write_csv(std::fs::File::create(path)?, &FLARE_GT_HEADER, rows)
}

pub fn parse_flare_gt(text: &str) -> Result<Vec<FlareGroundTruth>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    if reader.headers()?.iter().collect::<Vec<_>>() != FLARE_GT_HEADER {
        return Err(Error::Manifest(format!(
            "flare ground truth header must be `{}`",
            FLARE_GT_HEADER.join(",")
        )));
    }
    let flag = |s: &str| match s {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::Manifest(format!("bad flag `{other}`"))),
    };
    let num = |s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Manifest(format!("bad number `{s}`")))
    };
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::Manifest(format!("expected 6 fields, got {}", rec.len())));
        }
        data::validate_sample_id(&rec[0])?;
        out.push(FlareGroundTruth {
            sample_id: rec[0].to_string(),
            flare_applied_rgb: flag(&rec[1])?,
            flare_applied_ni: flag(&rec[2])?,
            flare_center: (num(&rec[3])?, num(&rec[4])?),
            flare_radius: num(&rec[5])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_label::compute_delta;

    fn small(p: f64) -> SynthConfig {
        SynthConfig {
            num_identities: 3,
            samples_per_identity: 4,
            image_size: (64, 32),
            flare_probability: p,
            flare_radius_range: (6.4, 9.6),
            train_identities: 1,
            ..Default::default()
        }
    }

    #[test]
    fn no_flare_means_no_bright_pixels() {
        let c = small(0.0);
        for id in 0..3 {
            for k in 0..4 {
                let r = render_sample(&c, id, k);
                assert!(r.flare.is_none());
                assert_eq!(compute_delta(&r.rgb).unwrap(), 0.0);
                assert_eq!(compute_delta(&r.ni).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn large_flares_exceed_the_bar() {
        let c = small(1.0);
        for id in 0..3 {
            for k in 0..4 {
                let r = render_sample(&c, id, k);
                assert!(r.flare.is_some());
                assert!(compute_delta(&r.rgb).unwrap() > 0.10);
            }
        }
    }

    #[test]
    fn thermal_view_is_flare_free_and_flare_is_monotone() {
        let (off, on) = (small(0.0), small(1.0));
        for id in 0..3 {
            for k in 0..4 {
                let a = render_sample(&off, id, k);
                let b = render_sample(&on, id, k);
                assert_eq!(a.ti, b.ti);
                assert!(a.rgb.as_raw().iter().zip(b.rgb.as_raw()).all(|(x, y)| y >= x));
                assert!(a.ni.as_raw().iter().zip(b.ni.as_raw()).all(|(x, y)| y >= x));
            }
        }
    }

    #[test]
    fn identities_differ() {
        let c = small(0.0);
        assert_ne!(render_sample(&c, 0, 0).rgb, render_sample(&c, 1, 0).rgb);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::parse("num_identities = 0\n").is_err());
        assert!(SynthConfig::parse("flare_probability = 1.5\n").is_err());
        assert!(SynthConfig::parse("flare_radius_min = 9\nflare_radius_max = 3\n").is_err());
        assert!(SynthConfig::parse("colour = red\n").is_err());
        let c = SynthConfig::parse("num_identities = 10\nimage_height = 64\nimage_width = 32\n").unwrap();
        assert_eq!(c.image_size, (64, 32));
        assert_eq!(c.train_identities, 5);
    }

    #[test]
    fn query_rows_are_also_gallery_rows() {
        let rows = split_rows(&small(0.0));
        let split = data::DatasetSplit::from_rows(&rows).unwrap();
        assert_eq!(split.train_ids.len(), 1);
        assert_eq!(split.query_samples.len(), 4);
    }

    #[test]
    fn flare_gt_parse_round_trip() {
        let t = FlareGroundTruth {
            sample_id: "v0001_002".into(),
            flare_applied_rgb: true,
            flare_applied_ni: true,
            flare_center: (3.5, 10.25),
            flare_radius: 7.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        write_flare_gt(&p, std::slice::from_ref(&t)).unwrap();
        let back = parse_flare_gt(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, vec![t]);
        assert!(parse_flare_gt("sample_id,flare_rgb,flare_ni,cx,cy,radius\nx,2,0,1,1,1\n").is_err());
    }
}
