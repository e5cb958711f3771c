//! Flare-aware cross-modal enhancement: thermal features are composited into
//! the masked regions of RGB/NI features, per sample.

use crate::data::Spectrum;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    #[default]
    Binary,
    Soft,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(MaskMode::Binary),
            "soft" => Ok(MaskMode::Soft),
            other => Err(Error::InvalidValue(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Binary => "binary",
            MaskMode::Soft => "soft",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedFeature {
    pub values: Tensor,
    pub spectrum: Spectrum,
    pub enhanced_flags: Vec<bool>,
}

/// Graph form of [`enhance`]. A single-channel mask is broadcast over the
/// feature channels.
pub fn enhance_node(g: &mut Graph, f_s: NodeId, f_t: NodeId, mask: NodeId, apply: &[bool]) -> Result<NodeId> {
    if g.shape(f_s) != g.shape(f_t) {
        return Err(Error::shape(
            "enhance",
            format!("{:?} vs thermal {:?}", g.shape(f_s), g.shape(f_t)),
        ));
    }
    let mask = if g.shape(mask) != g.shape(f_s) {
        let ones = g.input(Tensor::full(g.shape(f_s).to_vec(), 1.0));
        g.mul(ones, mask)?
    } else {
        mask
    };
    if !apply.iter().any(|&a| a) {
        if g.shape(f_s).first() != Some(&apply.len()) {
            return Err(Error::shape("enhance", format!("{} gate flags for {:?}", apply.len(), g.shape(f_s))));
        }
        return Ok(f_s);
    }
    let mixed = g.composite(f_s, f_t, mask)?;
    g.select(mixed, f_s, apply)
}

/// `f_T ⊙ M + f_S ⊙ (1 − M)` for samples with `apply` set; `f_S` verbatim
/// otherwise.
pub fn enhance(f_s: &Tensor, f_t: &Tensor, mask: &Tensor, apply: &[bool], spectrum: Spectrum) -> Result<EnhancedFeature> {
    if let Some(bad) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidValue(format!("mask value {bad} outside [0, 1]")));
    }
    let mut g = Graph::new();
    let (s, t, m) = (g.input(f_s.clone()), g.input(f_t.clone()), g.input(mask.clone()));
    let out = enhance_node(&mut g, s, t, m, apply)?;
    Ok(EnhancedFeature {
        values: g.value(out).clone(),
        spectrum,
        enhanced_flags: apply.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn compositing_endpoints_and_cell() {
        let s = t(&[1, 1, 1, 2], vec![3.0, -1.0]);
        let th = t(&[1, 1, 1, 2], vec![2.0, 7.5]);
        let one = enhance(&s, &th, &Tensor::full(vec![1, 1, 1, 2], 1.0), &[true], Spectrum::Rgb).unwrap();
        assert_eq!(one.values, th);
        let zero = enhance(&s, &th, &Tensor::zeros(vec![1, 1, 1, 2]), &[true], Spectrum::Rgb).unwrap();
        assert_eq!(zero.values, s);
        let quarter = enhance(&s, &th, &Tensor::full(vec![1, 1, 1, 2], 0.25), &[true], Spectrum::Ni).unwrap();
        assert!((quarter.values.data()[0] - 2.75).abs() < 1e-15);
    }

    #[test]
    fn gate_is_per_sample() {
        let s = t(&[2, 1, 1, 1], vec![1.0, 2.0]);
        let th = t(&[2, 1, 1, 1], vec![5.0, 6.0]);
        let m = Tensor::full(vec![2, 1, 1, 1], 1.0);
        let out = enhance(&s, &th, &m, &[false, true], Spectrum::Rgb).unwrap();
        assert_eq!(out.values.data(), &[1.0, 6.0]);
        assert_eq!(out.enhanced_flags, vec![false, true]);
    }

    #[test]
    fn broadcast_mask_covers_channels() {
        let s = Tensor::zeros(vec![1, 3, 1, 1]);
        let th = Tensor::full(vec![1, 3, 1, 1], 4.0);
        let m = Tensor::full(vec![1, 1, 1, 1], 0.5);
        let out = enhance(&s, &th, &m, &[true], Spectrum::Rgb).unwrap();
        assert_eq!(out.values.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(enhance(&s, &Tensor::zeros(vec![1, 1, 2, 1]), &s, &[true], Spectrum::Rgb).is_err());
        assert!(enhance(&s, &s, &Tensor::full(vec![1, 1, 2, 2], 1.5), &[true], Spectrum::Rgb).is_err());
        assert!(enhance(&s, &s, &s, &[true, false], Spectrum::Rgb).is_err());
        assert!(enhance(&s, &s, &s, &[false, false], Spectrum::Rgb).is_err());
    }

    proptest! {
        #[test]
        fn output_between_inputs(cells in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, 0.0f64..=1.0), 1..64)) {
            let n = cells.len();
            let s = t(&[1, n, 1, 1], cells.iter().map(|c| c.0).collect());
            let th = t(&[1, n, 1, 1], cells.iter().map(|c| c.1).collect());
            let m = t(&[1, n, 1, 1], cells.iter().map(|c| c.2).collect());
            let out = enhance(&s, &th, &m, &[true], Spectrum::Rgb).unwrap();
            for (o, (a, b, _)) in out.values.data().iter().zip(&cells) {
                prop_assert!(*o >= a.min(*b) && *o <= a.max(*b));
            }
            let off = enhance(&s, &th, &m, &[false], Spectrum::Rgb).unwrap();
            prop_assert_eq!(off.values, s);
        }
    }
}
