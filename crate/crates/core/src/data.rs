//! Dataset samples, the on-disk manifest, and P×K batch sampling.
//!
//! A dataset root looks like
//!
//! ```text
//! root/manifest.csv          sample_id,identity,camera,split
//! root/rgb/<sample_id>.png   3-channel
//! root/ni/<sample_id>.png    1-channel
//! root/ti/<sample_id>.png    1-channel
//! ```
//!
//! `split` is one of `train`, `gallery`, `query`. A query sample must also be
//! listed as gallery, so it appears on two rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 4] = ["sample_id", "identity", "camera", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Spectrum {
    Rgb,
    Ni,
    Ti,
}

impl Spectrum {
    pub const ALL: [Spectrum; 3] = [Spectrum::Rgb, Spectrum::Ni, Spectrum::Ti];

    pub fn as_str(self) -> &'static str {
        match self {
            Spectrum::Rgb => "rgb",
            Spectrum::Ni => "ni",
            Spectrum::Ti => "ti",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Spectrum::Rgb => 3,
            Spectrum::Ni | Spectrum::Ti => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "query" => Ok(Split::Query),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

/// Spatial size images are resized to on ingestion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSize {
    pub width: u32,
    pub height: u32,
}

impl Default for InputSize {
    fn default() -> Self {
        InputSize {
            width: 128,
            height: 256,
        }
    }
}

/// Aligned RGB / near-infrared / thermal-infrared views of one vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTriplet {
    pub sample_id: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
    pub rgb: RgbImage,
    pub ni: GrayImage,
    pub ti: GrayImage,
}

impl SpectralTriplet {
    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }
}

/// Sample ids become file names, so they must be a single plain path segment.
pub fn validate_sample_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Manifest(format!("invalid sample_id `{id}`")))
    }
}

#[derive(Deserialize)]
struct RawRow {
    sample_id: String,
    identity: u32,
    camera: u32,
    split: String,
}

/// Parse manifest text. Rows come back in file order.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest(format!(
            "expected header `{}`, got `{}`",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let raw = rec.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
        validate_sample_id(&raw.sample_id)?;
        rows.push(ManifestRow {
            split: raw.split.parse()?,
            sample_id: raw.sample_id,
            identity: raw.identity,
            camera: raw.camera,
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([
            r.sample_id.as_str(),
            &r.identity.to_string(),
            &r.camera.to_string(),
            r.split.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn spectrum_path(root: &Path, spectrum: Spectrum, sample_id: &str) -> PathBuf {
    root.join(spectrum.as_str()).join(format!("{sample_id}.png"))
}

/// Decode PNG bytes for one spectrum, converting to its channel layout.
pub fn decode_spectrum(bytes: &[u8], spectrum: Spectrum) -> Result<DynamicImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|source| {
        Error::Image {
            path: PathBuf::from(format!("<{spectrum} bytes>")),
            source,
        }
    })?;
    Ok(match spectrum {
        Spectrum::Rgb => DynamicImage::ImageRgb8(img.to_rgb8()),
        Spectrum::Ni | Spectrum::Ti => DynamicImage::ImageLuma8(img.to_luma8()),
    })
}

fn read_spectrum(root: &Path, spectrum: Spectrum, sample_id: &str) -> Result<DynamicImage> {
    let path = spectrum_path(root, spectrum, sample_id);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingImage {
                sample_id: sample_id.to_string(),
                spectrum: spectrum.as_str(),
                path,
            })
        }
        Err(e) => return Err(e.into()),
    };
    decode_spectrum(&bytes, spectrum).map_err(|e| match e {
        Error::Image { source, .. } => Error::Image { path, source },
        other => other,
    })
}

fn resize_rgb(img: RgbImage, size: InputSize) -> RgbImage {
    if img.dimensions() == (size.width, size.height) {
        img
    } else {
        imageops::resize(&img, size.width, size.height, FilterType::Triangle)
    }
}

fn resize_gray(img: GrayImage, size: InputSize) -> GrayImage {
    if img.dimensions() == (size.width, size.height) {
        img
    } else {
        imageops::resize(&img, size.width, size.height, FilterType::Triangle)
    }
}

fn load_triplet(root: &Path, row: &ManifestRow, size: InputSize) -> Result<SpectralTriplet> {
    let rgb = read_spectrum(root, Spectrum::Rgb, &row.sample_id)?.to_rgb8();
    let ni = read_spectrum(root, Spectrum::Ni, &row.sample_id)?.to_luma8();
    let ti = read_spectrum(root, Spectrum::Ti, &row.sample_id)?.to_luma8();
    if rgb.dimensions() != ni.dimensions() || rgb.dimensions() != ti.dimensions() {
        return Err(Error::Validation {
            sample_id: row.sample_id.clone(),
            detail: format!(
                "spectra disagree in size: rgb {:?}, ni {:?}, ti {:?}",
                rgb.dimensions(),
                ni.dimensions(),
                ti.dimensions()
            ),
        });
    }
    Ok(SpectralTriplet {
        sample_id: row.sample_id.clone(),
        identity: row.identity,
        camera: row.camera,
        split: row.split,
        rgb: resize_rgb(rgb, size),
        ni: resize_gray(ni, size),
        ti: resize_gray(ti, size),
    })
}

/// Load every manifest row, decoding and resizing its three images.
///
/// A sample listed on two rows (gallery and query) is decoded once and
/// returned twice, once per row.
pub fn load_manifest(path: &Path, size: InputSize) -> Result<Vec<SpectralTriplet>> {
    let text = std::fs::read_to_string(path)?;
    let rows = parse_manifest(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut cache: HashMap<&str, SpectralTriplet> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in &rows {
        let mut t = match cache.get(row.sample_id.as_str()) {
            Some(t) => t.clone(),
            None => {
                let t = load_triplet(root, row, size)?;
                cache.insert(&row.sample_id, t.clone());
                t
            }
        };
        t.identity = row.identity;
        t.camera = row.camera;
        t.split = row.split;
        out.push(t);
    }
    Ok(out)
}

/// Convenience wrapper taking the dataset root rather than the manifest path.
pub fn load_dataset(root: &Path, size: InputSize) -> Result<Vec<SpectralTriplet>> {
    load_manifest(&root.join(MANIFEST_FILE), size)
}

/// Size of the first manifest sample's RGB image, for loading without
/// resampling.
pub fn native_size(root: &Path) -> Result<InputSize> {
    let rows = parse_manifest(&std::fs::read_to_string(root.join(MANIFEST_FILE))?)?;
    let first = rows.first().ok_or(Error::Empty("manifest"))?;
    let path = spectrum_path(root, Spectrum::Rgb, &first.sample_id);
    let (width, height) = image::image_dimensions(&path).map_err(|source| Error::Image { path, source })?;
    Ok(InputSize { width, height })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: BTreeSet<u32>,
    pub gallery_samples: Vec<String>,
    pub query_samples: Vec<String>,
}

impl DatasetSplit {
    pub fn from_rows(rows: &[ManifestRow]) -> Result<Self> {
        let mut split = DatasetSplit::default();
        let mut eval_ids = BTreeSet::new();
        for r in rows {
            match r.split {
                Split::Train => {
                    split.train_ids.insert(r.identity);
                }
                Split::Gallery => {
                    eval_ids.insert(r.identity);
                    split.gallery_samples.push(r.sample_id.clone());
                }
                Split::Query => {
                    eval_ids.insert(r.identity);
                    split.query_samples.push(r.sample_id.clone());
                }
            }
        }
        split.validate_with(&eval_ids)?;
        Ok(split)
    }

    fn validate_with(&self, eval_ids: &BTreeSet<u32>) -> Result<()> {
        if let Some(id) = self.train_ids.intersection(eval_ids).next() {
            return Err(Error::Manifest(format!(
                "identity {id} appears in both train and evaluation splits"
            )));
        }
        let gallery: BTreeSet<&str> = self.gallery_samples.iter().map(String::as_str).collect();
        if let Some(q) = self.query_samples.iter().find(|q| !gallery.contains(q.as_str())) {
            return Err(Error::Manifest(format!(
                "query sample `{q}` is not listed in the gallery"
            )));
        }
        Ok(())
    }
}

/// `p` identities × `k` images each.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub triplets: Vec<&'a SpectralTriplet>,
    pub identities_per_batch: usize,
    pub images_per_identity: usize,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn identities(&self) -> Vec<u32> {
        self.triplets.iter().map(|t| t.identity).collect()
    }

    /// Checks the P×K shape: exactly `p` identities, each exactly `k` times.
    pub fn validate(&self) -> Result<()> {
        let (p, k) = (self.identities_per_batch, self.images_per_identity);
        if self.triplets.len() != p * k {
            return Err(Error::InvalidValue(format!(
                "batch has {} samples, expected {p}×{k}",
                self.triplets.len()
            )));
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for t in &self.triplets {
            *counts.entry(t.identity).or_default() += 1;
        }
        if counts.len() != p || counts.values().any(|&c| c != k) {
            return Err(Error::InvalidValue(format!(
                "batch identity counts {counts:?} are not {p}×{k}"
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        self.triplets
            .iter()
            .map(|t| t.sample_id.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Draw `p` distinct identities and `k` images of each.
///
/// Identities with at least `k` images are sampled without replacement; the
/// rest contribute every image once and are topped up with replacement.
pub fn sample_pk_batch(dataset: &[SpectralTriplet], p: usize, k: usize, seed: u64) -> Result<Batch<'_>> {
    if p == 0 || k == 0 {
        return Err(Error::InvalidValue("P and K must be positive".into()));
    }
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, t) in dataset.iter().enumerate() {
        by_id.entry(t.identity).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::NotEnoughIdentities {
            needed: p,
            available: by_id.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = by_id.keys().copied().collect();
    ids.shuffle(&mut rng);
    let mut triplets = Vec::with_capacity(p * k);
    for id in &ids[..p] {
        let pool = &by_id[id];
        let mut chosen: Vec<usize> = if pool.len() >= k {
            pool.choose_multiple(&mut rng, k).copied().collect()
        } else {
            let mut c = pool.clone();
            c.shuffle(&mut rng);
            while c.len() < k {
                c.push(pool[rng.gen_range(0..pool.len())]);
            }
            c
        };
        chosen.truncate(k);
        triplets.extend(chosen.into_iter().map(|i| &dataset[i]));
    }
    Ok(Batch {
        triplets,
        identities_per_batch: p,
        images_per_identity: k,
    })
}

/// Write `rows` as CSV with the given header; used for the small report files.
pub(crate) fn write_csv<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(id: &str, identity: u32) -> SpectralTriplet {
        SpectralTriplet {
            sample_id: id.into(),
            identity,
            camera: 0,
            split: Split::Train,
            rgb: RgbImage::new(2, 2),
            ni: GrayImage::new(2, 2),
            ti: GrayImage::new(2, 2),
        }
    }

    #[test]
    fn manifest_header_is_enforced() {
        assert!(parse_manifest("id,identity,camera,split\n").is_err());
        assert!(parse_manifest("sample_id,identity,camera,split\n").unwrap().is_empty());
    }

    #[test]
    fn manifest_rejects_path_like_ids_and_bad_split() {
        let bad = "sample_id,identity,camera,split\n../x,1,0,train\n";
        assert!(parse_manifest(bad).is_err());
        let bad = "sample_id,identity,camera,split\nx,1,0,validation\n";
        assert!(parse_manifest(bad).is_err());
        let bad = "sample_id,identity,camera,split\nx,-1,0,train\n";
        assert!(parse_manifest(bad).is_err());
    }

    #[test]
    fn split_invariants() {
        let rows = parse_manifest(
            "sample_id,identity,camera,split\na,0,0,train\nb,1,0,gallery\nb,1,0,query\nc,1,1,gallery\n",
        )
        .unwrap();
        let s = DatasetSplit::from_rows(&rows).unwrap();
        assert_eq!(s.query_samples, vec!["b"]);
        let leak = parse_manifest("sample_id,identity,camera,split\na,0,0,train\nb,0,1,gallery\n").unwrap();
        assert!(DatasetSplit::from_rows(&leak).is_err());
        let orphan = parse_manifest("sample_id,identity,camera,split\nb,1,0,query\n").unwrap();
        assert!(DatasetSplit::from_rows(&orphan).is_err());
    }

    #[test]
    fn pk_exact_fit() {
        let data: Vec<_> = (0..32).map(|i| blank(&format!("s{i}"), i / 4)).collect();
        let b = sample_pk_batch(&data, 8, 4, 7).unwrap();
        assert_eq!(b.len(), 32);
        b.validate().unwrap();
    }

    #[test]
    fn pk_is_seed_deterministic() {
        let data: Vec<_> = (0..32).map(|i| blank(&format!("s{i}"), i / 4)).collect();
        let a = sample_pk_batch(&data, 4, 4, 11).unwrap();
        let b = sample_pk_batch(&data, 4, 4, 11).unwrap();
        assert_eq!(a.describe(), b.describe());
    }

    #[test]
    fn pk_tops_up_small_identities() {
        // identity 9 has two images; every draw must use both and repeat to K
        let mut data: Vec<_> = (0..12).map(|i| blank(&format!("s{i}"), i / 4)).collect();
        data.push(blank("x0", 9));
        data.push(blank("x1", 9));
        for seed in 0..20 {
            let b = sample_pk_batch(&data, 4, 4, seed).unwrap();
            b.validate().unwrap();
            let small: Vec<&str> = b
                .triplets
                .iter()
                .filter(|t| t.identity == 9)
                .map(|t| t.sample_id.as_str())
                .collect();
            assert_eq!(small.len(), 4);
            assert!(small.contains(&"x0") && small.contains(&"x1"));
        }
    }

    #[test]
    fn pk_needs_enough_identities() {
        let data: Vec<_> = (0..8).map(|i| blank(&format!("s{i}"), i / 4)).collect();
        assert!(matches!(
            sample_pk_batch(&data, 3, 2, 0),
            Err(Error::NotEnoughIdentities { needed: 3, available: 2 })
        ));
    }
}
