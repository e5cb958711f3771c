//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Nodes are appended in evaluation order, so a single reverse sweep from the
//! root visits every node after all of its consumers.

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId, Vec<usize>),
    Mul(NodeId, NodeId, Vec<usize>),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Concat(Vec<NodeId>),
    Select {
        on_true: NodeId,
        on_false: NodeId,
        flags: Vec<bool>,
    },
    Composite {
        base: NodeId,
        fill: NodeId,
        mask: NodeId,
    },
    StraightThrough {
        soft: NodeId,
        threshold: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    PairwiseDistance(NodeId),
    BatchHard {
        dist: NodeId,
        /// `(anchor, hardest positive, hardest negative)` for anchors whose hinge is active.
        active: Vec<(usize, usize, usize)>,
        anchors: usize,
    },
    MinKl {
        a: NodeId,
        b: NodeId,
        /// Per-row weight on `KL(p‖q)` and `KL(q‖p)` in the upstream gradient.
        weights: Vec<(f64, f64)>,
        p: Vec<f64>,
        q: Vec<f64>,
        eps: f64,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Squared-distance floor for [`Graph::pairwise_distance`]. Distances below
/// `sqrt(DIST_FLOOR)` are clamped and carry no gradient.
pub const DIST_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`NodeId`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// For every flat index of `target`, the flat index into `operand` under
/// same-rank broadcasting (operand dims equal or 1). Rank-0 and single-element
/// operands broadcast everywhere.
fn broadcast_map(target: &[usize], operand: &[usize]) -> Result<Vec<usize>> {
    let numel: usize = target.iter().product();
    if operand.iter().product::<usize>() == 1 {
        return Ok(vec![0; numel]);
    }
    if operand.len() != target.len()
        || operand
            .iter()
            .zip(target)
            .any(|(&o, &t)| o != t && o != 1)
    {
        return Err(Error::shape(
            "broadcast",
            format!("{operand:?} does not broadcast to {target:?}"),
        ));
    }
    if operand == target {
        return Ok((0..numel).collect());
    }
    let rank = target.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if operand[d] == 1 { 0 } else { acc };
        acc *= operand[d];
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

fn ensure_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.positions();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(&map)
            .map(|(x, &j)| x + vb.data()[j])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b, map), ng))
    }

    /// `a ⊙ b`, with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(&map)
            .map(|(x, &j)| x * vb.data()[j])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b, map), ng))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// 2-d convolution of `x` (B×Cin×H×W) with `w` (Cout×Cin×kh×kw) and an
    /// optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (batch, in_ch, height, width) = self.value(x).dims4()?;
        let (out_ch, w_in, kh, kw) = self.value(w).dims4()?;
        if w_in != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_ch} channels, kernel expects {w_in}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {out_ch} outputs", self.shape(b)),
                ));
            }
        }
        if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} on {height}x{width} pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let k = geom.patch();
        let n = geom.positions();
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let keep_cols = self.needs(w) && !geom.is_pointwise();
        let mut cols_all = if keep_cols {
            vec![0.0; batch * k * n]
        } else {
            Vec::new()
        };
        let mut scratch = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; k * n]
        };
        let mut out = vec![0.0; batch * out_ch * n];
        let plane = in_ch * height * width;
        for bi in 0..batch {
            let xb = &xin[bi * plane..(bi + 1) * plane];
            let cols: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                let dst = if keep_cols {
                    &mut cols_all[bi * k * n..(bi + 1) * k * n]
                } else {
                    &mut scratch[..]
                };
                im2col(xb, &geom, dst);
                dst
            };
            gemm(
                out_ch,
                k,
                n,
                wv,
                false,
                cols,
                false,
                0.0,
                &mut out[bi * out_ch * n..(bi + 1) * out_ch * n],
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(n).enumerate() {
                let bias = bv[i % out_ch];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: cols_all,
            },
            ng,
        ))
    }

    /// Max pooling with a square window; padded cells never win.
    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape("max_pool2d", format!("window {kernel} on {h}x{w}")));
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, ng))
    }

    /// Adaptive average pooling to 1×1: B×C×H×W → B×C×1×1.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::new(vec![b, c, 1, 1], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), ng))
    }

    /// `x · wᵀ + b` for `x` B×D, `w` O×D, `b` O.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (rows, d) = self.value(x).dims2()?;
        let (o, wd) = self.value(w).dims2()?;
        if wd != d {
            return Err(Error::shape("linear", format!("input dim {d}, weight dim {wd}")));
        }
        let mut out = vec![0.0; rows * o];
        gemm(
            rows,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, bb)| *v += bb);
            }
        }
        let value = Tensor::new(vec![rows, o], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat inputs"))?;
        let shape0 = self.shape(first).to_vec();
        if shape0.len() < 2 {
            return Err(Error::shape("concat", "rank < 2"));
        }
        let outer = shape0[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != shape0.len() || s[0] != outer || s[2..] != shape0[2..] {
                return Err(Error::shape("concat", format!("{shape0:?} vs {s:?}")));
            }
            total += s[1];
        }
        let mut data = Vec::new();
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let inner = v.len() / outer;
                data.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = shape0;
        shape[1] = total;
        let value = Tensor::new(shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Per-sample choice along axis 0: row `i` comes from `on_true` when
    /// `flags[i]` is set, else from `on_false`.
    pub fn select(&mut self, on_true: NodeId, on_false: NodeId, flags: &[bool]) -> Result<NodeId> {
        let (vt, vf) = (self.value(on_true), self.value(on_false));
        ensure_same("select", vt, vf)?;
        if vt.shape().first() != Some(&flags.len()) {
            return Err(Error::shape(
                "select",
                format!("{} flags for shape {:?}", flags.len(), vt.shape()),
            ));
        }
        let inner = vt.len() / flags.len().max(1);
        let mut data = Vec::with_capacity(vt.len());
        for (i, &f) in flags.iter().enumerate() {
            let src = if f { vt } else { vf };
            data.extend_from_slice(&src.data()[i * inner..(i + 1) * inner]);
        }
        let value = Tensor::new(vt.shape().to_vec(), data)?;
        let ng = self.needs(on_true) || self.needs(on_false);
        Ok(self.push(
            value,
            Op::Select {
                on_true,
                on_false,
                flags: flags.to_vec(),
            },
            ng,
        ))
    }

    /// `fill ⊙ mask + base ⊙ (1 − mask)`, elementwise.
    ///
    /// Cells with mask exactly 0 or 1 copy `base` or `fill` verbatim; other
    /// cells are clamped to the closed interval spanned by the two inputs.
    pub fn composite(&mut self, base: NodeId, fill: NodeId, mask: NodeId) -> Result<NodeId> {
        let (vb, vf, vm) = (self.value(base), self.value(fill), self.value(mask));
        ensure_same("composite", vb, vf)?;
        ensure_same("composite", vb, vm)?;
        let data = vb
            .data()
            .iter()
            .zip(vf.data())
            .zip(vm.data())
            .map(|((&s, &t), &m)| composite_cell(s, t, m))
            .collect();
        let value = Tensor::new(vb.shape().to_vec(), data)?;
        let ng = self.needs(base) || self.needs(fill) || self.needs(mask);
        Ok(self.push(value, Op::Composite { base, fill, mask }, ng))
    }

    /// Hard threshold `soft > sigmoid(threshold)` with a straight-through
    /// backward pass: the gradient flows to `soft` unchanged and to the
    /// threshold as if the output were `soft − sigmoid(threshold)`.
    pub fn straight_through(&mut self, soft: NodeId, threshold: NodeId) -> Result<NodeId> {
        if self.value(threshold).len() != 1 {
            return Err(Error::shape(
                "straight_through",
                format!("threshold must be a scalar, got {:?}", self.shape(threshold)),
            ));
        }
        let t = sigmoid(self.value(threshold).data()[0]);
        let value = self.value(soft).map(|s| if s > t { 1.0 } else { 0.0 });
        let ng = self.needs(soft) || self.needs(threshold);
        Ok(self.push(value, Op::StraightThrough { soft, threshold }, ng))
    }

    /// Mean softmax cross-entropy of `logits` (B×C) against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, classes) = self.value(logits).dims2()?;
        if rows != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows, {} labels", labels.len()),
            ));
        }
        if rows == 0 {
            return Err(Error::Empty("cross-entropy batch"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let lv = self.value(logits).data();
        let probs = softmax_rows(lv, classes);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / rows as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Euclidean distances between all rows of `x` (B×D) → B×B.
    pub fn pairwise_distance(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, d) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                let sq: f64 = (0..d)
                    .map(|k| {
                        let diff = xv[i * d + k] - xv[j * d + k];
                        diff * diff
                    })
                    .sum();
                out[i * rows + j] = sq.max(DIST_FLOOR).sqrt();
            }
        }
        let value = Tensor::new(vec![rows, rows], out)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::PairwiseDistance(x), ng))
    }

    /// Batch-hard triplet hinge over a B×B distance matrix: each anchor takes
    /// its farthest same-label row and its nearest other-label row, and the
    /// result is the mean of `max(margin + d_pos − d_neg, 0)`.
    pub fn batch_hard_triplet(&mut self, dist: NodeId, labels: &[usize], margin: f64) -> Result<NodeId> {
        let (rows, cols) = self.value(dist).dims2()?;
        if rows != cols || rows != labels.len() {
            return Err(Error::shape(
                "batch_hard_triplet",
                format!("distance {rows}x{cols}, {} labels", labels.len()),
            ));
        }
        if rows == 0 {
            return Err(Error::Empty("triplet batch"));
        }
        let dv = self.value(dist).data();
        let mut total = 0.0;
        let mut active = Vec::new();
        for a in 0..rows {
            let row = &dv[a * rows..(a + 1) * rows];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..rows {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| row[j] < row[n]) {
                    neg = Some(j);
                }
            }
            let p = pos.ok_or(Error::NoTripletPartner {
                anchor: a,
                kind: "positive",
            })?;
            let n = neg.ok_or(Error::NoTripletPartner {
                anchor: a,
                kind: "negative",
            })?;
            let hinge = margin + row[p] - row[n];
            if hinge > 0.0 {
                total += hinge;
                active.push((a, p, n));
            }
        }
        let value = Tensor::scalar(total / rows as f64);
        let ng = self.needs(dist);
        Ok(self.push(
            value,
            Op::BatchHard {
                dist,
                active,
                anchors: rows,
            },
            ng,
        ))
    }

    /// `min(KL(p‖q), KL(q‖p))` between row-softmax distributions of `a` and
    /// `b` (B×C), probabilities clamped below at `eps`.
    ///
    /// With `per_sample` the minimum is taken per row and averaged; otherwise
    /// the two batch-mean divergences are compared once.
    pub fn min_kl(&mut self, a: NodeId, b: NodeId, eps: f64, per_sample: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure_same("min_kl", va, vb)?;
        let (rows, classes) = va.dims2()?;
        if rows == 0 {
            return Err(Error::Empty("consistency batch"));
        }
        let p = softmax_rows(va.data(), classes);
        let q = softmax_rows(vb.data(), classes);
        let mut kl_pq = Vec::with_capacity(rows);
        let mut kl_qp = Vec::with_capacity(rows);
        for i in 0..rows {
            let (mut pq, mut qp) = (0.0, 0.0);
            for j in i * classes..(i + 1) * classes {
                let (pc, qc) = (p[j].max(eps), q[j].max(eps));
                pq += pc * (pc / qc).ln();
                qp += qc * (qc / pc).ln();
            }
            kl_pq.push(pq);
            kl_qp.push(qp);
        }
        let inv = 1.0 / rows as f64;
        let (loss, weights) = if per_sample {
            let mut loss = 0.0;
            let weights = kl_pq
                .iter()
                .zip(&kl_qp)
                .map(|(&pq, &qp)| {
                    if pq <= qp {
                        loss += pq * inv;
                        (inv, 0.0)
                    } else {
                        loss += qp * inv;
                        (0.0, inv)
                    }
                })
                .collect();
            (loss, weights)
        } else {
            let mean_pq = kl_pq.iter().sum::<f64>() * inv;
            let mean_qp = kl_qp.iter().sum::<f64>() * inv;
            if mean_pq <= mean_qp {
                (mean_pq, vec![(inv, 0.0); rows])
            } else {
                (mean_qp, vec![(0.0, inv); rows])
            }
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MinKl {
                a,
                b,
                weights,
                p,
                q,
                eps,
            },
            ng,
        ))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        ensure_same("weighted_sum", self.value(x), &weights)?;
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights }, ng))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn zeros_like(&self, id: NodeId) -> Tensor {
        Tensor::zeros(self.shape(id).to_vec())
    }

    fn reduce_broadcast(&self, operand: NodeId, map: &[usize], contrib: impl Iterator<Item = f64>) -> Tensor {
        let mut out = self.zeros_like(operand);
        let d = out.data_mut();
        for (&j, c) in map.iter().zip(contrib) {
            d[j] += c;
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, map) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let gb = self.reduce_broadcast(*b, map, gd.iter().copied());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, map) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let data = gd.iter().zip(map).map(|(gg, &j)| gg * vb[j]).collect();
                    let ga = Tensor::new(g.shape().to_vec(), data).expect("same shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.reduce_broadcast(*b, map, gd.iter().zip(va).map(|(gg, x)| gg * x));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let data = gd.iter().zip(va).map(|(gg, &x)| if x > 0.0 { *gg } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("same shape"));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let data = gd.iter().zip(y).map(|(gg, &s)| gg * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("same shape"));
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.shape(*a).to_vec()).expect("same numel");
                self.accumulate(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, geom, cols } => self.conv_backward(*x, *w, *b, geom, cols, gd, grads),
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let mut gx = self.zeros_like(*x);
                    let d = gx.data_mut();
                    for (&idx, gg) in argmax.iter().zip(gd) {
                        d[idx] += gg;
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = h * w;
                let mut gx = self.zeros_like(*x);
                for (plane, gg) in gx.data_mut().chunks_mut(hw).zip(gd) {
                    plane.iter_mut().for_each(|v| *v = gg / hw as f64);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let (rows, d) = self.value(*x).dims2().expect("rank 2");
                let o = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * d];
                    gemm(rows, o, d, gd, false, self.value(*w).data(), false, 0.0, &mut gx);
                    self.accumulate(grads, *x, Tensor::new(vec![rows, d], gx).expect("shape"));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; o * d];
                    gemm(o, rows, d, gd, true, self.value(*x).data(), false, 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::new(vec![o, d], gw).expect("shape"));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut gb = vec![0.0; o];
                    for row in gd.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(grads, b, Tensor::new(vec![o], gb).expect("shape"));
                }
            }
            Op::Concat(parts) => {
                let outer = g.shape()[0];
                let inner_out = g.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let inner = self.value(p).len() / outer;
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(inner * outer);
                        for o in 0..outer {
                            let start = o * inner_out + offset;
                            data.extend_from_slice(&gd[start..start + inner]);
                        }
                        let gp = Tensor::new(self.shape(p).to_vec(), data).expect("shape");
                        self.accumulate(grads, p, gp);
                    }
                    offset += inner;
                }
            }
            Op::Select {
                on_true,
                on_false,
                flags,
            } => {
                let inner = g.len() / flags.len().max(1);
                let mut gt = self.zeros_like(*on_true);
                let mut gf = self.zeros_like(*on_false);
                for (i, &f) in flags.iter().enumerate() {
                    let dst = if f { gt.data_mut() } else { gf.data_mut() };
                    dst[i * inner..(i + 1) * inner].copy_from_slice(&gd[i * inner..(i + 1) * inner]);
                }
                self.accumulate(grads, *on_true, gt);
                self.accumulate(grads, *on_false, gf);
            }
            Op::Composite { base, fill, mask } => {
                let s = self.value(*base).data();
                let t = self.value(*fill).data();
                let m = self.value(*mask).data();
                let shape = g.shape().to_vec();
                if self.needs(*base) {
                    let data = gd.iter().zip(m).map(|(gg, mm)| gg * (1.0 - mm)).collect();
                    self.accumulate(grads, *base, Tensor::new(shape.clone(), data).expect("shape"));
                }
                if self.needs(*fill) {
                    let data = gd.iter().zip(m).map(|(gg, mm)| gg * mm).collect();
                    self.accumulate(grads, *fill, Tensor::new(shape.clone(), data).expect("shape"));
                }
                if self.needs(*mask) {
                    let data = gd
                        .iter()
                        .zip(s.iter().zip(t))
                        .map(|(gg, (ss, tt))| gg * (tt - ss))
                        .collect();
                    self.accumulate(grads, *mask, Tensor::new(shape, data).expect("shape"));
                }
            }
            Op::StraightThrough { soft, threshold } => {
                self.accumulate(grads, *soft, g.clone());
                if self.needs(*threshold) {
                    let s = sigmoid(self.value(*threshold).data()[0]);
                    let gt = -g.sum() * s * (1.0 - s);
                    let shape = self.shape(*threshold).to_vec();
                    self.accumulate(grads, *threshold, Tensor::new(shape, vec![gt]).expect("scalar"));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = gd[0] / rows as f64;
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * classes + y] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::new(vec![rows, classes], gl).expect("shape"));
            }
            Op::PairwiseDistance(x) => {
                let (rows, d) = self.value(*x).dims2().expect("rank 2");
                let xv = self.value(*x).data();
                let dist = node.value.data();
                let mut gx = vec![0.0; rows * d];
                for i in 0..rows {
                    for j in 0..rows {
                        let gij = gd[i * rows + j];
                        let dij = dist[i * rows + j];
                        if gij == 0.0 || dij * dij <= DIST_FLOOR {
                            continue;
                        }
                        for k in 0..d {
                            let c = gij * (xv[i * d + k] - xv[j * d + k]) / dij;
                            gx[i * d + k] += c;
                            gx[j * d + k] -= c;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, d], gx).expect("shape"));
            }
            Op::BatchHard {
                dist,
                active,
                anchors,
            } => {
                let scale = gd[0] / *anchors as f64;
                let mut gdist = self.zeros_like(*dist);
                let n = *anchors;
                let dst = gdist.data_mut();
                for &(a, p, neg) in active {
                    dst[a * n + p] += scale;
                    dst[a * n + neg] -= scale;
                }
                self.accumulate(grads, *dist, gdist);
            }
            Op::MinKl {
                a,
                b,
                weights,
                p,
                q,
                eps,
            } => {
                let (rows, classes) = self.value(*a).dims2().expect("rank 2");
                let mut ga = vec![0.0; rows * classes];
                let mut gb = vec![0.0; rows * classes];
                let mut up = vec![0.0; classes];
                let mut uq = vec![0.0; classes];
                for (i, &(w_pq, w_qp)) in weights.iter().enumerate() {
                    let row = i * classes..(i + 1) * classes;
                    let (pr, qr) = (&p[row.clone()], &q[row.clone()]);
                    for j in 0..classes {
                        let (pc, qc) = (pr[j].max(*eps), qr[j].max(*eps));
                        // d/dp̃ and d/dq̃ of w_pq·KL(p̃‖q̃) + w_qp·KL(q̃‖p̃)
                        let dp = w_pq * ((pc / qc).ln() + 1.0) - w_qp * qc / pc;
                        let dq = w_qp * ((qc / pc).ln() + 1.0) - w_pq * pc / qc;
                        up[j] = if pr[j] >= *eps { dp * gd[0] } else { 0.0 };
                        uq[j] = if qr[j] >= *eps { dq * gd[0] } else { 0.0 };
                    }
                    let dot_p: f64 = pr.iter().zip(&up).map(|(x, y)| x * y).sum();
                    let dot_q: f64 = qr.iter().zip(&uq).map(|(x, y)| x * y).sum();
                    for j in 0..classes {
                        ga[i * classes + j] = pr[j] * (up[j] - dot_p);
                        gb[i * classes + j] = qr[j] * (uq[j] - dot_q);
                    }
                }
                let shape = vec![rows, classes];
                self.accumulate(grads, *a, Tensor::new(shape.clone(), ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(shape, gb).expect("shape"));
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.map(|w| w * gd[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
        cols: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let k = geom.patch();
        let n = geom.positions();
        let co = geom.out_ch;
        let plane = geom.in_ch * geom.height * geom.width;
        let xv = self.value(x).data();
        if self.needs(w) {
            let mut gw = vec![0.0; co * k];
            for bi in 0..geom.batch {
                let gb = &gd[bi * co * n..(bi + 1) * co * n];
                let cb = if geom.is_pointwise() {
                    &xv[bi * plane..(bi + 1) * plane]
                } else {
                    &cols[bi * k * n..(bi + 1) * k * n]
                };
                gemm(co, n, k, gb, false, cb, true, 1.0, &mut gw);
            }
            let gw = Tensor::new(self.shape(w).to_vec(), gw).expect("shape");
            self.accumulate(grads, w, gw);
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let mut gbias = vec![0.0; co];
            for (i, chunk) in gd.chunks(n).enumerate() {
                gbias[i % co] += chunk.iter().sum::<f64>();
            }
            self.accumulate(grads, b, Tensor::new(vec![co], gbias).expect("shape"));
        }
        if self.needs(x) {
            let wv = self.value(w).data();
            let mut gx = vec![0.0; geom.batch * plane];
            let mut dcols = vec![0.0; k * n];
            for bi in 0..geom.batch {
                let gb = &gd[bi * co * n..(bi + 1) * co * n];
                let dst = &mut gx[bi * plane..(bi + 1) * plane];
                if geom.is_pointwise() {
                    gemm(k, co, n, wv, true, gb, false, 0.0, dst);
                } else {
                    gemm(k, co, n, wv, true, gb, false, 0.0, &mut dcols);
                    col2im(&dcols, geom, dst);
                }
            }
            let gx = Tensor::new(self.shape(x).to_vec(), gx).expect("shape");
            self.accumulate(grads, x, gx);
        }
    }
}

/// One cell of `fill ⊙ mask + base ⊙ (1 − mask)`.
pub(crate) fn composite_cell(base: f64, fill: f64, mask: f64) -> f64 {
    if mask == 0.0 {
        base
    } else if mask == 1.0 {
        fill
    } else {
        let (lo, hi) = if base <= fill { (base, fill) } else { (fill, base) };
        (fill * mask + base * (1.0 - mask)).clamp(lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_channel_vector() {
        let map = broadcast_map(&[1, 2, 1, 3], &[1, 2, 1, 1]).unwrap();
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        assert!(broadcast_map(&[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::new();
        let xv: Vec<f64> = (0..2 * 2 * 4 * 5).map(|v| (v as f64 * 0.37).sin()).collect();
        let wv: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| (v as f64 * 0.11).cos()).collect();
        let x = g.input(Tensor::new(vec![2, 2, 4, 5], xv.clone()).unwrap());
        let w = g.input(Tensor::new(vec![3, 2, 3, 3], wv.clone()).unwrap());
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 2, 3]);
        let out = g.value(y).data();
        for b in 0..2 {
            for o in 0..3 {
                for oy in 0..2 {
                    for ox in 0..3 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                        continue;
                                    }
                                    acc += xv[((b * 2 + c) * 4 + iy as usize) * 5 + ix as usize]
                                        * wv[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out[((b * 3 + o) * 2 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn composite_endpoints_are_exact() {
        assert_eq!(composite_cell(3.0, 2.0, 0.0), 3.0);
        assert_eq!(composite_cell(3.0, 2.0, 1.0), 2.0);
        assert_eq!(composite_cell(3.0, 2.0, 0.25), 2.75);
    }

    #[test]
    fn select_rejects_wrong_flag_count() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        assert!(g.select(a, b, &[true]).is_err());
    }

    #[test]
    fn gradients_skip_constant_branches() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![2], 1.5));
        let p = g.param(Tensor::full(vec![2], 2.0));
        let y = g.mul(x, p).unwrap();
        let s = g.weighted_sum(y, Tensor::full(vec![2], 1.0)).unwrap();
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.5, 1.5]);
    }
}
