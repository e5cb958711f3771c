//! Three-branch network with flare mask prediction and enhancement.

use rand::Rng;

use crate::backbone::{spectrum_tensor, Backbone, BackboneConfig, ClassifierHead};
use crate::data::{SpectralTriplet, Spectrum};
use crate::error::{Error, Result};
use crate::fce::{enhance_node, MaskMode};
use crate::graph::NodeId;
use crate::losses::{loss_ic, loss_identity, loss_total, loss_triplet, IcReduction, LossBreakdown, LossParts, LossWeights};
use crate::mfmp::{loss_flare, FlareMask, MaskLayout, MaskNodes, Mfmp, MfmpConfig, THRESHOLD_PARAM};
use crate::nn::{ParamStore, Session};
use crate::pseudo_label::{FlarePseudoLabel, SamplePseudoLabels};
use crate::tensor::Tensor;

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_mfmp: bool,
    pub use_fmi: bool,
    pub use_fce: bool,
    pub use_ic: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_mfmp: true,
        use_fmi: true,
        use_fce: true,
        use_ic: true,
    };
    pub const BASELINE: Ablation = Ablation {
        use_mfmp: false,
        use_fmi: false,
        use_fce: false,
        use_ic: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.use_fce && !self.use_mfmp {
            return Err(Error::InvalidValue("use_fce requires use_mfmp (the masks come from it)".into()));
        }
        Ok(())
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub mask_layout: MaskLayout,
    pub ablation: Ablation,
    pub fce_mask_mode: MaskMode,
    pub ic_reduction: IcReduction,
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub pseudo_bar: f64,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            num_classes,
            mask_layout: MaskLayout::Channelwise,
            ablation: Ablation::FULL,
            fce_mask_mode: MaskMode::Binary,
            ic_reduction: IcReduction::PerSample,
            margin: crate::losses::DEFAULT_MARGIN,
            loss_weights: LossWeights::default(),
            pseudo_bar: crate::pseudo_label::DEFAULT_BAR,
        }
    }
}

/// Everything one forward pass needs from a batch.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    /// RGB, NI, TI in [`Spectrum::ALL`] order.
    pub images: [Tensor; 3],
    pub labels: Vec<usize>,
    pub flare_rgb: Vec<FlarePseudoLabel>,
    pub flare_ni: Vec<FlarePseudoLabel>,
    /// Per-sample enhancement gate.
    pub gate: Vec<bool>,
}

impl BatchInputs {
    /// `labels` may be empty for inference. Pseudo-labels come from the raw
    /// images, so mirroring does not change them.
    pub fn new(triplets: &[&SpectralTriplet], labels: Vec<usize>, flip: &[bool], bar: f64) -> Result<Self> {
        if flip.len() != triplets.len() || !(labels.is_empty() || labels.len() == triplets.len()) {
            return Err(Error::shape(
                "batch_inputs",
                format!("{} samples, {} flips, {} labels", triplets.len(), flip.len(), labels.len()),
            ));
        }
        let images = [
            spectrum_tensor(triplets, Spectrum::Rgb, flip)?,
            spectrum_tensor(triplets, Spectrum::Ni, flip)?,
            spectrum_tensor(triplets, Spectrum::Ti, flip)?,
        ];
        let pl: Vec<SamplePseudoLabels> = triplets.iter().map(|t| SamplePseudoLabels::of(t, bar)).collect::<Result<_>>()?;
        Ok(BatchInputs {
            images,
            labels,
            flare_rgb: pl.iter().map(|p| p.rgb).collect(),
            flare_ni: pl.iter().map(|p| p.ni).collect(),
            gate: pl.iter().map(SamplePseudoLabels::is_flare).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub embeddings: [NodeId; 3],
    pub scores: [NodeId; 3],
    pub masks: Option<[MaskNodes; 2]>,
    pub flare_logits: Option<[NodeId; 2]>,
}

#[derive(Clone, Debug)]
pub struct FaceNet {
    pub config: ModelConfig,
    pub branches: [Backbone; 3],
    pub heads: [ClassifierHead; 3],
    pub mfmp: Mfmp,
}

impl FaceNet {
    /// Registers every parameter in `store`, including those of disabled
    /// components, so runs with different switches share an initialisation.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.ablation.validate()?;
        if config.num_classes == 0 {
            return Err(Error::InvalidValue("num_classes must be positive".into()));
        }
        let mut branch = |s: Spectrum, rng: &mut R| Backbone::new(store, s.as_str(), s, config.backbone, rng);
        let branches = [branch(Spectrum::Rgb, rng)?, branch(Spectrum::Ni, rng)?, branch(Spectrum::Ti, rng)?];
        let dim = config.backbone.embedding_dim;
        let heads = Spectrum::ALL.map(|s| ClassifierHead::new(store, &format!("head.{}", s.as_str()), dim, config.num_classes, rng));
        let mfmp = Mfmp::new(
            store,
            MfmpConfig {
                channels: config.backbone.plug_channels(),
                layout: config.mask_layout,
            },
            rng,
        );
        Ok(FaceNet {
            config,
            branches,
            heads,
            mfmp,
        })
    }

    pub fn forward(&self, s: &mut Session, inputs: &BatchInputs) -> Result<ForwardNodes> {
        let ab = self.config.ablation;
        let mut feats = [0, 1, 2].map(|_| None);
        for (i, b) in self.branches.iter().enumerate() {
            let x = s.input(inputs.images[i].clone());
            feats[i] = Some(b.extract(s, x)?);
        }
        let [mut f_r, mut f_n, f_t] = feats.map(Option::unwrap);
        let (mut masks, mut flare_logits) = (None, None);
        if ab.use_mfmp {
            let m = self.mfmp.forward(s, f_r, f_n, ab.use_fmi)?;
            f_r = m.rgb.processed;
            f_n = m.ni.processed;
            if ab.use_fce {
                let pick = |n: &MaskNodes| match self.config.fce_mask_mode {
                    MaskMode::Binary => n.binary,
                    MaskMode::Soft => n.soft,
                };
                f_r = enhance_node(&mut s.graph, f_r, f_t, pick(&m.rgb), &inputs.gate)?;
                f_n = enhance_node(&mut s.graph, f_n, f_t, pick(&m.ni), &inputs.gate)?;
            }
            masks = Some([m.rgb, m.ni]);
            flare_logits = Some([m.logits_rgb, m.logits_ni]);
        }
        let mut embeddings = [f_r, f_n, f_t];
        let mut scores = embeddings;
        for i in 0..3 {
            embeddings[i] = self.branches[i].finish(s, embeddings[i])?;
            scores[i] = self.heads[i].classify(s, embeddings[i])?;
        }
        Ok(ForwardNodes {
            embeddings,
            scores,
            masks,
            flare_logits,
        })
    }

    pub fn loss(&self, s: &mut Session, fwd: &ForwardNodes, inputs: &BatchInputs) -> Result<(NodeId, LossBreakdown)> {
        let c = &self.config;
        let g = &mut s.graph;
        let mut parts = LossParts {
            id: Some(loss_identity(g, &fwd.scores, &inputs.labels)?),
            tri: Some(loss_triplet(g, &fwd.embeddings, &inputs.labels, c.margin)?),
            ..Default::default()
        };
        if let Some([lr, ln]) = fwd.flare_logits {
            let a = loss_flare(s, lr, &inputs.flare_rgb)?;
            let b = loss_flare(s, ln, &inputs.flare_ni)?;
            parts.flare = Some(s.graph.add(a, b)?);
        }
        if c.ablation.use_ic {
            parts.ic = Some(loss_ic(&mut s.graph, fwd.scores[0], fwd.scores[1], c.ic_reduction)?);
        }
        loss_total(&mut s.graph, parts, c.loss_weights)
    }

    /// Concatenated RGB/NI/TI embeddings, one row per triplet.
    pub fn embed(&self, store: &ParamStore, triplets: &[&SpectralTriplet], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(triplets.len());
        for part in triplets.chunks(chunk.max(1)) {
            let inputs = BatchInputs::new(part, Vec::new(), &vec![false; part.len()], self.config.pseudo_bar)?;
            let mut s = Session::inference(store);
            let fwd = self.forward(&mut s, &inputs)?;
            let e = fwd.embeddings.map(|n| s.value(n).clone());
            let dim = self.config.backbone.embedding_dim;
            for i in 0..part.len() {
                let mut v = Vec::with_capacity(3 * dim);
                for t in &e {
                    v.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// RGB and NI flare masks, or `None` when mask prediction is disabled.
    pub fn masks(&self, store: &ParamStore, triplets: &[&SpectralTriplet]) -> Result<Option<[FlareMask; 2]>> {
        if !self.config.ablation.use_mfmp {
            return Ok(None);
        }
        let inputs = BatchInputs::new(triplets, Vec::new(), &vec![false; triplets.len()], self.config.pseudo_bar)?;
        let mut s = Session::inference(store);
        let fwd = self.forward(&mut s, &inputs)?;
        let threshold = store.require(THRESHOLD_PARAM)?.data()[0];
        Ok(fwd.masks.map(|m| {
            m.map(|n| FlareMask {
                soft: s.value(n.soft).clone(),
                binary: s.value(n.binary).clone(),
                threshold,
            })
        }))
    }
}
