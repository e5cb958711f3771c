//! Mutual flare mask prediction.
//!
//! [`Fmi`] fuses RGB and NI plug-layer features into a common flare
//! representation. A [`MaskHead`] per flare-susceptible spectrum turns that
//! representation and the spectrum's own features into a soft mask in
//! `[0, 1]` and a binary mask thresholded at `sigmoid(Δ)`. An [`SmpHead`]
//! classifies each image as flared or not from its pooled soft mask, trained
//! against the histogram pseudo-label.

use rand::Rng;

use crate::backbone::FeatureMap;
use crate::data::Spectrum;
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::nn::{Conv2d, Init, Linear, ParamStore, Session};
use crate::pseudo_label::FlarePseudoLabel;
use crate::tensor::Tensor;

/// Kernel sizes of the four fusion convolutions, in application order.
pub const FUSION_KERNELS: [usize; 4] = [3, 3, 1, 3];

pub const THRESHOLD_PARAM: &str = "mfmp.threshold";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLayout {
    /// One mask value per channel and position (B×C×H×W).
    Channelwise,
    /// One spatial mask broadcast over channels (B×1×H×W).
    Broadcast,
}

impl std::str::FromStr for MaskLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channelwise" => Ok(MaskLayout::Channelwise),
            "broadcast" => Ok(MaskLayout::Broadcast),
            other => Err(Error::InvalidValue(format!("unknown mask layout `{other}`"))),
        }
    }
}

impl MaskLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskLayout::Channelwise => "channelwise",
            MaskLayout::Broadcast => "broadcast",
        }
    }
}

/// Fused RGB/NI flare features, same shape as one spectrum's features.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonFlareFeature {
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlareMask {
    pub soft: Tensor,
    pub binary: Tensor,
    /// Raw Δ; the comparison threshold is `sigmoid(Δ)`.
    pub threshold: f64,
}

/// Two-way flared / clean logits, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FlareClassifierOutput {
    pub logits: Tensor,
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Flare-susceptible modality interaction.
#[derive(Clone, Debug)]
pub struct Fmi {
    fusion: Vec<Conv2d>,
    attention: [Conv2d; 2],
}

impl Fmi {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let mut prev = 2 * channels;
        let fusion = FUSION_KERNELS
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let c = Conv2d::new(store, &format!("{prefix}.fuse{i}"), prev, channels, k, 1, true, Init::He, rng);
                prev = channels;
                c
            })
            .collect();
        let hidden = (channels / 4).max(1);
        let attention = [
            Conv2d::new(store, &format!("{prefix}.att0"), channels, hidden, 1, 1, true, Init::He, rng),
            Conv2d::new(store, &format!("{prefix}.att1"), hidden, channels, 1, 1, true, Init::He, rng),
        ];
        Fmi { fusion, attention }
    }

    /// Channel concat → fusion convs (each rectified) → pooled channel
    /// attention → `att ⊙ f + f`.
    pub fn common(&self, s: &mut Session, f_rgb: NodeId, f_ni: NodeId) -> Result<NodeId> {
        check_same("fmi_common", s.graph.shape(f_rgb), s.graph.shape(f_ni))?;
        let mut x = s.graph.concat(&[f_rgb, f_ni])?;
        for conv in &self.fusion {
            let h = conv.forward(s, x)?;
            x = s.graph.relu(h);
        }
        let fused = x;
        let pooled = s.graph.global_avg_pool(fused)?;
        let a = self.attention[0].forward(s, pooled)?;
        let a = s.graph.relu(a);
        let a = self.attention[1].forward(s, a)?;
        let att = s.graph.sigmoid(a);
        let gated = s.graph.mul(fused, att)?;
        s.graph.add(gated, fused)
    }

    pub fn common_features(&self, store: &ParamStore, f_rgb: &FeatureMap, f_ni: &FeatureMap) -> Result<CommonFlareFeature> {
        let mut s = Session::inference(store);
        let r = s.input(f_rgb.values.clone());
        let n = s.input(f_ni.values.clone());
        let c = self.common(&mut s, r, n)?;
        Ok(CommonFlareFeature {
            values: s.value(c).clone(),
        })
    }
}

/// Graph nodes produced by a [`MaskHead`].
#[derive(Clone, Copy, Debug)]
pub struct MaskNodes {
    pub soft: NodeId,
    pub binary: NodeId,
    /// `pre ⊙ f_S + f_S`, the feature the branch continues from when no
    /// enhancement is applied.
    pub processed: NodeId,
}

/// Per-spectrum mask predictor.
#[derive(Clone, Debug)]
pub struct MaskHead {
    spectrum: Spectrum,
    common_proj: Conv2d,
    feature_proj: Conv2d,
    squash: Conv2d,
}

impl MaskHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spectrum: Spectrum,
        channels: usize,
        layout: MaskLayout,
        rng: &mut R,
    ) -> Self {
        let out = match layout {
            MaskLayout::Channelwise => channels,
            MaskLayout::Broadcast => 1,
        };
        MaskHead {
            spectrum,
            common_proj: Conv2d::new(store, &format!("{prefix}.common_proj"), channels, channels, 1, 1, true, Init::Normal(0.02), rng),
            feature_proj: Conv2d::new(store, &format!("{prefix}.feature_proj"), channels, channels, 1, 1, true, Init::Normal(0.02), rng),
            squash: Conv2d::new(store, &format!("{prefix}.squash"), channels, out, 1, 1, true, Init::He, rng),
        }
    }

    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    /// `affine = proj(common) ⊙ proj(f_S) + proj(f_S)` (the B×C×HW affine
    /// matrix, kept in B×C×H×W layout), `pre = affine ⊙ f_S + f_S`,
    /// `soft = sigmoid(squash(pre))`, `binary = [soft > sigmoid(Δ)]`.
    pub fn forward(&self, s: &mut Session, common: NodeId, f_s: NodeId) -> Result<MaskNodes> {
        check_same("fmi_mask", s.graph.shape(common), s.graph.shape(f_s))?;
        let c = self.common_proj.forward(s, common)?;
        let f = self.feature_proj.forward(s, f_s)?;
        let cf = s.graph.mul(c, f)?;
        let affine = s.graph.add(cf, f)?;
        let gated = s.graph.mul(affine, f_s)?;
        let processed = s.graph.add(gated, f_s)?;
        let logits = self.squash.forward(s, processed)?;
        let soft = s.graph.sigmoid(logits);
        let delta = s.param(THRESHOLD_PARAM)?;
        let binary = s.graph.straight_through(soft, delta)?;
        Ok(MaskNodes {
            soft,
            binary,
            processed,
        })
    }

    pub fn mask(&self, store: &ParamStore, common: &CommonFlareFeature, f_s: &FeatureMap) -> Result<FlareMask> {
        let mut s = Session::inference(store);
        let c = s.input(common.values.clone());
        let f = s.input(f_s.values.clone());
        let m = self.forward(&mut s, c, f)?;
        Ok(FlareMask {
            soft: s.value(m.soft).clone(),
            binary: s.value(m.binary).clone(),
            threshold: store.require(THRESHOLD_PARAM)?.data()[0],
        })
    }
}

/// Self-supervised flare classifier on a pooled soft mask.
#[derive(Clone, Debug)]
pub struct SmpHead {
    linear: Linear,
}

impl SmpHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, mask_channels: usize, rng: &mut R) -> Self {
        SmpHead {
            linear: Linear::new(store, prefix, mask_channels, 2, true, Init::Normal(0.1), rng),
        }
    }

    pub fn classify(&self, s: &mut Session, soft: NodeId) -> Result<NodeId> {
        let pooled = s.graph.global_avg_pool(soft)?;
        let (b, c) = (s.graph.shape(pooled)[0], s.graph.shape(pooled)[1]);
        let flat = s.graph.reshape(pooled, &[b, c])?;
        self.linear.forward(s, flat)
    }

    pub fn logits(&self, store: &ParamStore, mask: &FlareMask) -> Result<FlareClassifierOutput> {
        let mut s = Session::inference(store);
        let m = s.input(mask.soft.clone());
        let l = self.classify(&mut s, m)?;
        Ok(FlareClassifierOutput {
            logits: s.value(l).clone(),
        })
    }
}

/// Mean two-class cross-entropy against the pseudo-labels.
pub fn loss_flare(s: &mut Session, logits: NodeId, labels: &[FlarePseudoLabel]) -> Result<NodeId> {
    let classes: Vec<usize> = labels.iter().map(FlarePseudoLabel::class).collect();
    s.graph.cross_entropy(logits, &classes)
}

pub fn loss_flare_value(logits: &FlareClassifierOutput, labels: &[FlarePseudoLabel]) -> Result<f64> {
    let store = ParamStore::new();
    let mut s = Session::inference(&store);
    let l = s.input(logits.logits.clone());
    let out = loss_flare(&mut s, l, labels)?;
    Ok(s.value(out).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfmpConfig {
    pub channels: usize,
    pub layout: MaskLayout,
}

/// FMI plus one mask head and one SMP head per flare-susceptible spectrum.
#[derive(Clone, Debug)]
pub struct Mfmp {
    pub fmi: Fmi,
    pub rgb: MaskHead,
    pub ni: MaskHead,
    pub smp_rgb: SmpHead,
    pub smp_ni: SmpHead,
    pub config: MfmpConfig,
}

/// Per-spectrum mask outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MfmpNodes {
    pub common_rgb: NodeId,
    pub common_ni: NodeId,
    pub rgb: MaskNodes,
    pub ni: MaskNodes,
    pub logits_rgb: NodeId,
    pub logits_ni: NodeId,
}

impl Mfmp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: MfmpConfig, rng: &mut R) -> Self {
        store.insert(THRESHOLD_PARAM, Tensor::zeros(vec![1]));
        let c = config.channels;
        let mask_ch = match config.layout {
            MaskLayout::Channelwise => c,
            MaskLayout::Broadcast => 1,
        };
        Mfmp {
            fmi: Fmi::new(store, "mfmp.fmi", c, rng),
            rgb: MaskHead::new(store, "mfmp.rgb", Spectrum::Rgb, c, config.layout, rng),
            ni: MaskHead::new(store, "mfmp.ni", Spectrum::Ni, c, config.layout, rng),
            smp_rgb: SmpHead::new(store, "mfmp.smp_rgb", mask_ch, rng),
            smp_ni: SmpHead::new(store, "mfmp.smp_ni", mask_ch, rng),
            config,
        }
    }

    /// With `use_fmi` off each head sees its own spectrum's features in place
    /// of the fused representation.
    pub fn forward(&self, s: &mut Session, f_rgb: NodeId, f_ni: NodeId, use_fmi: bool) -> Result<MfmpNodes> {
        let (common_rgb, common_ni) = if use_fmi {
            let c = self.fmi.common(s, f_rgb, f_ni)?;
            (c, c)
        } else {
            (f_rgb, f_ni)
        };
        let rgb = self.rgb.forward(s, common_rgb, f_rgb)?;
        let ni = self.ni.forward(s, common_ni, f_ni)?;
        let logits_rgb = self.smp_rgb.classify(s, rgb.soft)?;
        let logits_ni = self.smp_ni.classify(s, ni.soft)?;
        Ok(MfmpNodes {
            common_rgb,
            common_ni,
            rgb,
            ni,
            logits_rgb,
            logits_ni,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(t: Tensor, spectrum: Spectrum) -> FeatureMap {
        FeatureMap { values: t, spectrum }
    }

    fn build(layout: MaskLayout) -> (ParamStore, Mfmp) {
        let mut store = ParamStore::new();
        let m = Mfmp::new(&mut store, MfmpConfig { channels: 8, layout }, &mut ChaCha8Rng::seed_from_u64(5));
        (store, m)
    }

    #[test]
    fn common_feature_shape() {
        let (store, m) = build(MaskLayout::Channelwise);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = fm(Tensor::randn(vec![2, 8, 4, 8], 1.0, &mut rng), Spectrum::Rgb);
        let n = fm(Tensor::randn(vec![2, 8, 4, 8], 1.0, &mut rng), Spectrum::Ni);
        assert_eq!(m.fmi.common_features(&store, &r, &n).unwrap().values.shape(), &[2, 8, 4, 8]);
        let bad = fm(Tensor::zeros(vec![2, 8, 4, 4]), Spectrum::Ni);
        assert!(m.fmi.common_features(&store, &r, &bad).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_common_feature() {
        let (mut store, m) = build(MaskLayout::Channelwise);
        store.zero_prefix("mfmp.fmi");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = fm(Tensor::randn(vec![2, 8, 4, 8], 1.0, &mut rng), Spectrum::Rgb);
        let n = fm(Tensor::randn(vec![2, 8, 4, 8], 1.0, &mut rng), Spectrum::Ni);
        let c = m.fmi.common_features(&store, &r, &n).unwrap();
        assert!(c.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn common_feature_is_batch_permutation_equivariant() {
        let (store, m) = build(MaskLayout::Channelwise);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::randn(vec![2, 8, 4, 8], 1.0, &mut rng);
        let n = Tensor::randn(vec![2, 8, 4, 8], 1.0, &mut rng);
        let swap = |t: &Tensor| Tensor::cat_outer(&[t.slice_outer(1, 2).unwrap(), t.slice_outer(0, 1).unwrap()]).unwrap();
        let a = m.fmi.common_features(&store, &fm(r.clone(), Spectrum::Rgb), &fm(n.clone(), Spectrum::Ni)).unwrap();
        let b = m.fmi.common_features(&store, &fm(swap(&r), Spectrum::Rgb), &fm(swap(&n), Spectrum::Ni)).unwrap();
        assert_eq!(swap(&a.values), b.values);
    }

    #[test]
    fn zero_squash_head_gives_half_mask() {
        let (mut store, m) = build(MaskLayout::Channelwise);
        store.zero_prefix("mfmp.rgb.squash");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = fm(Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng), Spectrum::Rgb);
        let c = CommonFlareFeature {
            values: Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng),
        };
        let mask = m.rgb.mask(&store, &c, &f).unwrap();
        assert!(mask.soft.data().iter().all(|&v| v == 0.5));
        // Δ = 0 → threshold 0.5, and 0.5 > 0.5 is false
        assert!(mask.binary.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_limits() {
        let (mut store, m) = build(MaskLayout::Channelwise);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = fm(Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng), Spectrum::Ni);
        let c = CommonFlareFeature {
            values: Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng),
        };
        store.get_mut(THRESHOLD_PARAM).unwrap().data_mut()[0] = 1e3;
        let hi = m.ni.mask(&store, &c, &f).unwrap();
        assert!(hi.binary.data().iter().all(|&v| v == 0.0));
        store.get_mut(THRESHOLD_PARAM).unwrap().data_mut()[0] = -1e3;
        let lo = m.ni.mask(&store, &c, &f).unwrap();
        assert!(lo.binary.data().iter().all(|&v| v == 1.0));
        assert!(lo.soft.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn broadcast_layout_has_one_channel() {
        let (store, m) = build(MaskLayout::Broadcast);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = fm(Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng), Spectrum::Rgb);
        let c = CommonFlareFeature {
            values: Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng),
        };
        let mask = m.rgb.mask(&store, &c, &f).unwrap();
        assert_eq!(mask.soft.shape(), &[2, 1, 3, 3]);
        assert_eq!(m.smp_rgb.logits(&store, &mask).unwrap().logits.shape(), &[2, 2]);
    }

    #[test]
    fn heads_do_not_share_parameters() {
        let (store, m) = build(MaskLayout::Channelwise);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = fm(Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng), Spectrum::Rgb);
        let c = CommonFlareFeature {
            values: Tensor::randn(vec![2, 8, 3, 3], 1.0, &mut rng),
        };
        let a = m.rgb.mask(&store, &c, &f).unwrap();
        let b = m.ni.mask(&store, &c, &f).unwrap();
        assert_ne!(a.soft, b.soft);
        // copying the weights across makes the heads agree
        let mut copied = store.clone();
        let names: Vec<String> = store.names().filter(|n| n.starts_with("mfmp.rgb.")).map(String::from).collect();
        for n in names {
            let v = store.get(&n).unwrap().clone();
            copied.insert(n.replacen("mfmp.rgb.", "mfmp.ni.", 1), v);
        }
        assert_eq!(m.ni.mask(&copied, &c, &f).unwrap().soft, a.soft);
    }

    #[test]
    fn smp_constant_mask_zero_head() {
        let (mut store, m) = build(MaskLayout::Channelwise);
        store.zero_prefix("mfmp.smp_rgb");
        let mask = FlareMask {
            soft: Tensor::full(vec![3, 8, 2, 2], 0.5),
            binary: Tensor::zeros(vec![3, 8, 2, 2]),
            threshold: 0.0,
        };
        let out = m.smp_rgb.logits(&store, &mask).unwrap();
        assert_eq!(out.logits.shape(), &[3, 2]);
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flare_loss_reference_values() {
        let clean = FlarePseudoLabel::new(0.0, 0.1);
        let flared = FlarePseudoLabel::new(0.5, 0.1);
        let uniform = FlareClassifierOutput {
            logits: Tensor::zeros(vec![1, 2]),
        };
        for l in [clean, flared] {
            let v = loss_flare_value(&uniform, &[l]).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let confident = FlareClassifierOutput {
            logits: Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap(),
        };
        // −log softmax = ln(1 + e^{−20})
        let right = loss_flare_value(&confident, &[clean]).unwrap();
        assert!((right / (-20f64).exp().ln_1p() - 1.0).abs() < 1e-6);
        assert!(right < 2.1e-9 && right > 2.0e-9);
        let wrong = loss_flare_value(&confident, &[flared]).unwrap();
        assert!((wrong - (20.0 + (-20f64).exp().ln_1p())).abs() < 1e-12);
        assert!(wrong >= 10.0);
    }
}
