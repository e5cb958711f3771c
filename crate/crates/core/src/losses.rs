//! Identity, triplet, inter-modality consistency and total losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const PROB_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IcReduction {
    /// Minimum of the two directions per sample, then the batch mean.
    #[default]
    PerSample,
    /// Minimum of the two batch-mean divergences.
    PerBatch,
}

impl std::str::FromStr for IcReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(IcReduction::PerSample),
            "per_batch" => Ok(IcReduction::PerBatch),
            other => Err(Error::InvalidValue(format!("unknown consistency reduction `{other}`"))),
        }
    }
}

impl IcReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            IcReduction::PerSample => "per_sample",
            IcReduction::PerBatch => "per_batch",
        }
    }
}

/// Sum over branches of the mean cross-entropy.
pub fn loss_identity(g: &mut Graph, scores: &[NodeId], labels: &[usize]) -> Result<NodeId> {
    sum_over(g, scores, |g, s| g.cross_entropy(s, labels))
}

/// Sum over branches of the batch-hard triplet loss on Euclidean distances.
pub fn loss_triplet(g: &mut Graph, embeddings: &[NodeId], labels: &[usize], margin: f64) -> Result<NodeId> {
    sum_over(g, embeddings, |g, e| {
        let d = g.pairwise_distance(e)?;
        g.batch_hard_triplet(d, labels, margin)
    })
}

/// Smaller of the two directed KL divergences between the softmax
/// distributions of two branches.
pub fn loss_ic(g: &mut Graph, scores_rgb: NodeId, scores_ni: NodeId, reduction: IcReduction) -> Result<NodeId> {
    g.min_kl(scores_rgb, scores_ni, PROB_EPS, reduction == IcReduction::PerSample)
}

fn sum_over(
    g: &mut Graph,
    parts: &[NodeId],
    mut f: impl FnMut(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &p in parts {
        let l = f(g, p)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    acc.ok_or(Error::Empty("loss branches"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub id: f64,
    pub tri: f64,
    pub flare: f64,
    pub ic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            id: 1.0,
            tri: 1.0,
            flare: 1.0,
            ic: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_tri: f64,
    pub l_f: f64,
    pub l_ic: f64,
    pub l_all: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: [&'static str; 6] = ["step", "l_id", "l_tri", "l_f", "l_ic", "l_all"];

    pub fn is_finite(&self) -> bool {
        [self.l_id, self.l_tri, self.l_f, self.l_ic, self.l_all].iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_id={:.6} l_tri={:.6} l_f={:.6} l_ic={:.6} l_all={:.6}",
            self.l_id, self.l_tri, self.l_f, self.l_ic, self.l_all
        )
    }
}

/// Loss terms of one batch. Absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub id: Option<NodeId>,
    pub tri: Option<NodeId>,
    pub flare: Option<NodeId>,
    pub ic: Option<NodeId>,
}

/// Weighted sum of the present terms, plus the unweighted values for logging.
pub fn loss_total(g: &mut Graph, parts: LossParts, weights: LossWeights) -> Result<(NodeId, LossBreakdown)> {
    let terms = [
        (parts.id, weights.id),
        (parts.tri, weights.tri),
        (parts.flare, weights.flare),
        (parts.ic, weights.ic),
    ];
    let mut vals = [0.0; 4];
    let mut acc: Option<NodeId> = None;
    for (i, (node, w)) in terms.into_iter().enumerate() {
        let Some(n) = node else { continue };
        if g.value(n).len() != 1 {
            return Err(Error::shape("loss_total", format!("term {i} has shape {:?}", g.shape(n))));
        }
        vals[i] = g.value(n).data()[0];
        let scaled = if w == 1.0 { n } else { g.scale(n, w) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    let total = match acc {
        Some(t) => t,
        None => g.input(Tensor::scalar(0.0)),
    };
    let breakdown = LossBreakdown {
        l_id: vals[0],
        l_tri: vals[1],
        l_f: vals[2],
        l_ic: vals[3],
        l_all: g.value(total).data()[0],
    };
    Ok((total, breakdown))
}
