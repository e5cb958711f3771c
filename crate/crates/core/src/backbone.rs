//! Per-spectrum convolutional feature extractors.
//!
//! Each spectrum owns a separate [`Backbone`] with its own parameter prefix, so
//! no weights are shared between RGB, NI and TI. A backbone is split at
//! `plug_layer`: [`Backbone::extract`] runs the stages up to and including it,
//! and [`Backbone::finish`] runs the rest, pools, and projects to the
//! embedding.

use rand::Rng;

use crate::data::{SpectralTriplet, Spectrum};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::nn::{Conv2d, Init, Linear, ParamStore, Session};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;

/// Stage widths of the small desk-scale network.
pub const TINY_WIDTHS: [usize; NUM_STAGES] = [16, 32, 48, 64];

const RESNET50_BLOCKS: [usize; NUM_STAGES] = [3, 4, 6, 3];
const RESNET50_WIDTHS: [usize; NUM_STAGES] = [64, 128, 256, 512];
const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Four stride-2 3×3 conv stages.
    Tiny,
    /// Bottleneck residual layout of a 50-layer residual network (stem,
    /// `[3, 4, 6, 3]` blocks), without normalisation layers.
    Resnet50,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Variant::Tiny),
            "resnet50" | "resnet50-shape" => Ok(Variant::Resnet50),
            other => Err(Error::InvalidValue(format!("unknown backbone variant `{other}`"))),
        }
    }
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Resnet50 => "resnet50",
        }
    }

    /// Output channels of stage `stage` (1-based).
    pub fn stage_channels(self, stage: usize) -> usize {
        match self {
            Variant::Tiny => TINY_WIDTHS[stage - 1],
            Variant::Resnet50 => RESNET50_WIDTHS[stage - 1] * BOTTLENECK_EXPANSION,
        }
    }

    /// `(C, H, W)` after stage `stage` for an input of `height × width`.
    pub fn stage_shape(self, stage: usize, height: usize, width: usize) -> (usize, usize, usize) {
        let halvings = match self {
            Variant::Tiny => stage,
            // stem conv + max pool, then one stride-2 block per later stage
            Variant::Resnet50 => stage + 1,
        };
        let (mut h, mut w) = (height, width);
        for _ in 0..halvings {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (self.stage_channels(stage), h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Stage (1..=4) after which the flare modules are applied.
    pub plug_layer: usize,
    pub embedding_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: Variant::Tiny,
            plug_layer: 4,
            embedding_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_STAGES).contains(&self.plug_layer) {
            return Err(Error::InvalidValue(format!(
                "plug_layer must be in 1..={NUM_STAGES}, got {}",
                self.plug_layer
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidValue("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn plug_channels(&self) -> usize {
        self.variant.stage_channels(self.plug_layer)
    }
}

/// Rank-4 activations of one spectrum branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub spectrum: Spectrum,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Bottleneck {
    fn forward(&self, s: &mut Session, x: NodeId) -> Result<NodeId> {
        let h = self.reduce.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.spatial.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.expand.forward(s, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(s, x)?,
            None => x,
        };
        let out = s.graph.add(h, skip)?;
        Ok(s.graph.relu(out))
    }
}

#[derive(Clone, Debug)]
enum Block {
    ConvRelu(Conv2d),
    MaxPool,
    Bottleneck(Bottleneck),
}

impl Block {
    fn forward(&self, s: &mut Session, x: NodeId) -> Result<NodeId> {
        match self {
            Block::ConvRelu(c) => {
                let h = c.forward(s, x)?;
                Ok(s.graph.relu(h))
            }
            Block::MaxPool => s.graph.max_pool2d(x, 3, 2, 1),
            Block::Bottleneck(b) => b.forward(s, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spectrum: Spectrum,
    config: BackboneConfig,
    stages: Vec<Vec<Block>>,
    projection: Linear,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spectrum: Spectrum,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let in_ch = spectrum.channels();
        let stages = match config.variant {
            Variant::Tiny => {
                let mut prev = in_ch;
                (0..NUM_STAGES)
                    .map(|i| {
                        let c = Conv2d::new(
                            store,
                            &format!("{prefix}.stage{}.conv", i + 1),
                            prev,
                            TINY_WIDTHS[i],
                            3,
                            2,
                            true,
                            Init::He,
                            rng,
                        );
                        prev = TINY_WIDTHS[i];
                        vec![Block::ConvRelu(c)]
                    })
                    .collect()
            }
            Variant::Resnet50 => resnet50_stages(store, prefix, in_ch, rng),
        };
        let final_ch = config.variant.stage_channels(NUM_STAGES);
        let projection = Linear::new(
            store,
            &format!("{prefix}.embed"),
            final_ch,
            config.embedding_dim,
            true,
            Init::Normal((1.0 / final_ch as f64).sqrt()),
            rng,
        );
        Ok(Backbone {
            spectrum,
            config,
            stages,
            projection,
        })
    }

    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn run_stages(&self, s: &mut Session, mut x: NodeId, range: std::ops::Range<usize>) -> Result<NodeId> {
        for stage in &self.stages[range] {
            for block in stage {
                x = block.forward(s, x)?;
            }
        }
        Ok(x)
    }

    /// Stages `1..=plug_layer`.
    pub fn extract(&self, s: &mut Session, images: NodeId) -> Result<NodeId> {
        let expected = self.spectrum.channels();
        match s.graph.shape(images) {
            [_, c, _, _] if *c == expected => {}
            other => {
                return Err(Error::shape(
                    "backbone.extract",
                    format!("{} input must be B×{expected}×H×W, got {other:?}", self.spectrum),
                ))
            }
        }
        self.run_stages(s, images, 0..self.config.plug_layer)
    }

    /// Remaining stages, global average pooling and projection → B×embedding_dim.
    pub fn finish(&self, s: &mut Session, features: NodeId) -> Result<NodeId> {
        let want = self.config.plug_channels();
        let (b, c, _, _) = s.value(features).dims4()?;
        if c != want {
            return Err(Error::shape(
                "backbone.finish",
                format!("expected {want} channels at stage {}, got {c}", self.config.plug_layer),
            ));
        }
        let x = self.run_stages(s, features, self.config.plug_layer..NUM_STAGES)?;
        let pooled = s.graph.global_avg_pool(x)?;
        let final_ch = s.graph.shape(pooled)[1];
        let flat = s.graph.reshape(pooled, &[b, final_ch])?;
        self.projection.forward(s, flat)
    }

    /// Inference-mode split forward: the plug-layer features and a handle that
    /// completes the pass.
    pub fn extract_features<'a>(
        &'a self,
        store: &'a ParamStore,
        images: &Tensor,
    ) -> Result<(FeatureMap, Continuation<'a>)> {
        let mut s = Session::inference(store);
        let x = s.input(images.clone());
        let f = self.extract(&mut s, x)?;
        let values = s.value(f).clone();
        let shape = values.shape().to_vec();
        Ok((
            FeatureMap {
                values,
                spectrum: self.spectrum,
            },
            Continuation {
                backbone: self,
                store,
                shape,
            },
        ))
    }

    /// Full inference-mode forward to the embedding.
    pub fn embed(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(store);
        let x = s.input(images.clone());
        let f = self.extract(&mut s, x)?;
        let e = self.finish(&mut s, f)?;
        Ok(s.value(e).clone())
    }
}

fn resnet50_stages<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_ch: usize, rng: &mut R) -> Vec<Vec<Block>> {
    let stem = Conv2d::new(store, &format!("{prefix}.stem"), in_ch, 64, 7, 2, true, Init::He, rng);
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut prev = 64;
    for (li, (&blocks, &width)) in RESNET50_BLOCKS.iter().zip(&RESNET50_WIDTHS).enumerate() {
        let mut stage = Vec::new();
        if li == 0 {
            stage.push(Block::ConvRelu(stem.clone()));
            stage.push(Block::MaxPool);
        }
        let out = width * BOTTLENECK_EXPANSION;
        for bi in 0..blocks {
            let name = format!("{prefix}.layer{}.{bi}", li + 1);
            let stride = if bi == 0 && li > 0 { 2 } else { 1 };
            let reduce = Conv2d::new(store, &format!("{name}.reduce"), prev, width, 1, 1, true, Init::He, rng);
            let spatial = Conv2d::new(store, &format!("{name}.spatial"), width, width, 3, stride, true, Init::He, rng);
            // zero-initialised expansion keeps each block an identity map at start
            let expand = Conv2d::new(store, &format!("{name}.expand"), width, out, 1, 1, true, Init::Zeros, rng);
            let shortcut = (bi == 0).then(|| {
                Conv2d::new(store, &format!("{name}.shortcut"), prev, out, 1, stride, true, Init::He, rng)
            });
            stage.push(Block::Bottleneck(Bottleneck {
                reduce,
                spatial,
                expand,
                shortcut,
            }));
            prev = out;
        }
        stages.push(stage);
    }
    stages
}

/// Completes a split forward pass started by [`Backbone::extract_features`].
pub struct Continuation<'a> {
    backbone: &'a Backbone,
    store: &'a ParamStore,
    shape: Vec<usize>,
}

impl Continuation<'_> {
    /// Run the remaining stages on `features`, which must have the shape of
    /// the extracted map (it may be an enhanced version of it).
    pub fn finish(&self, features: &FeatureMap) -> Result<Tensor> {
        if features.values.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "continuation",
                format!("expected {:?}, got {:?}", self.shape, features.values.shape()),
            ));
        }
        let mut s = Session::inference(self.store);
        let x = s.input(features.values.clone());
        let e = self.backbone.finish(&mut s, x)?;
        Ok(s.value(e).clone())
    }
}

/// Per-spectrum identity classifier on the embedding.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    linear: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embedding_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            linear: Linear::new(store, name, embedding_dim, num_classes, true, Init::Normal(0.01), rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_dim()
    }

    /// Unnormalised class scores, B×num_classes.
    pub fn classify(&self, s: &mut Session, embedding: NodeId) -> Result<NodeId> {
        self.linear.forward(s, embedding)
    }

    pub fn scores(&self, store: &ParamStore, embedding: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(store);
        let e = s.input(embedding.clone());
        let out = self.classify(&mut s, e)?;
        Ok(s.value(out).clone())
    }
}

/// Normalised B×C×H×W input for one spectrum: `(v / 255 − 0.5) / 0.5`.
/// Rows with `flip[i]` set are mirrored horizontally.
pub fn spectrum_tensor(batch: &[&SpectralTriplet], spectrum: Spectrum, flip: &[bool]) -> Result<Tensor> {
    let first = batch.first().ok_or(Error::Empty("image batch"))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let c = spectrum.channels();
    let mut data = Vec::with_capacity(batch.len() * c * h * w);
    for (i, t) in batch.iter().enumerate() {
        if (t.width() as usize, t.height() as usize) != (w, h) {
            return Err(Error::Validation {
                sample_id: t.sample_id.clone(),
                detail: format!("image size {}x{} differs from batch {w}x{h}", t.width(), t.height()),
            });
        }
        let raw: &[u8] = match spectrum {
            Spectrum::Rgb => t.rgb.as_raw(),
            Spectrum::Ni => t.ni.as_raw(),
            Spectrum::Ti => t.ti.as_raw(),
        };
        let mirror = flip.get(i).copied().unwrap_or(false);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if mirror { w - 1 - x } else { x };
                    let v = raw[(y * w + sx) * c + ch] as f64;
                    data.push((v / 255.0 - 0.5) / 0.5);
                }
            }
        }
    }
    Tensor::new(vec![batch.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(plug: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            plug_layer: plug,
            ..Default::default()
        };
        let b = Backbone::new(&mut store, "rgb", Spectrum::Rgb, cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, b)
    }

    #[test]
    fn tiny_shapes_follow_the_table() {
        let (store, b) = tiny(4);
        let x = Tensor::randn(vec![2, 3, 256, 128], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (f, _) = b.extract_features(&store, &x).unwrap();
        let (c, h, w) = Variant::Tiny.stage_shape(4, 256, 128);
        assert_eq!((c, h, w), (64, 16, 8));
        assert_eq!(f.values.shape(), &[2, c, h, w]);
    }

    #[test]
    fn continuation_composes_to_full_forward() {
        for plug in 1..=4 {
            let (store, b) = tiny(plug);
            let x = Tensor::randn(vec![2, 3, 32, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            let (f, cont) = b.extract_features(&store, &x).unwrap();
            assert_eq!(cont.finish(&f).unwrap(), b.embed(&store, &x).unwrap());
            let wrong = FeatureMap {
                values: Tensor::zeros(vec![2, 1, 1, 1]),
                spectrum: Spectrum::Rgb,
            };
            assert!(cont.finish(&wrong).is_err());
        }
    }

    #[test]
    fn zero_weights_zero_input_give_zero_embedding() {
        let (mut store, b) = tiny(2);
        store.zero_prefix("rgb");
        let e = b.embed(&store, &Tensor::zeros(vec![2, 3, 32, 16])).unwrap();
        assert_eq!(e.shape(), &[2, 64]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let (store, b) = tiny(4);
        assert!(b.embed(&store, &Tensor::zeros(vec![1, 1, 32, 16])).is_err());
    }

    #[test]
    fn resnet50_shape_stages() {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            variant: Variant::Resnet50,
            plug_layer: 3,
            embedding_dim: 8,
        };
        let b = Backbone::new(&mut store, "ti", Spectrum::Ti, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let convs = store.names().filter(|n| n.ends_with(".weight") && !n.contains("shortcut") && !n.contains("embed")).count();
        // stem + 3 convs per bottleneck × 16 bottlenecks + projection = 50 weighted layers
        assert_eq!(convs + 1, 50);
        let x = Tensor::randn(vec![1, 1, 64, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (f, cont) = b.extract_features(&store, &x).unwrap();
        let (c, h, w) = Variant::Resnet50.stage_shape(3, 64, 32);
        assert_eq!((c, h, w), (1024, 4, 2));
        assert_eq!(f.values.shape(), &[1, c, h, w]);
        assert_eq!(cont.finish(&f).unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn classifier_zero_head_and_length() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "cls", 8, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let e = Tensor::randn(vec![3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(head.scores(&store, &e).unwrap().shape(), &[3, 5]);
        store.zero_prefix("cls");
        let z = head.scores(&store, &Tensor::zeros(vec![1, 8])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
