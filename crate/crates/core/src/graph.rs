//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are recorded in evaluation order, so every node's inputs precede it
//! and a single reverse sweep visits each node after all of its consumers.
//! Images and feature maps use NHWC layout (`[batch, height, width, channels]`).

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        /// im2col matrix, kept only when a gradient will be needed.
        cols: Vec<f64>,
    },
    AvgPool2(NodeId),
    GlobalAvgPool(NodeId),
    L2Normalize {
        input: NodeId,
        /// Reciprocal row norms; zero for all-zero rows.
        inv_norms: Vec<f64>,
    },
    Concat(Vec<NodeId>),
    Sum(NodeId),
    WeightedSum {
        input: NodeId,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A computation graph. Build it forward, call [`Graph::backward`] once (or
/// several times to accumulate), then read leaf gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: Option<DefaultHasher>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that fingerprints the activation pattern of every
    /// non-differentiable point it passes (relu, abs, top-k selections).
    /// Used by the gradient checker to detect finite-difference steps that
    /// cross a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: Some(DefaultHasher::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest absolute value held by any node.
    pub fn value_scale(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|n| n.value.data())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Fingerprint of all kink-relevant decisions made so far.
    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    /// Records a discrete selection (e.g. a top-k index set computed outside
    /// the graph) in the kink fingerprint.
    pub fn note_selection(&mut self, indices: &[usize]) {
        if let Some(h) = self.kinks.as_mut() {
            indices.hash(h);
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("leaf of shape {:?}", value.shape())));
        }
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out = va.map(f64::abs);
        if let Some(h) = self.kinks.as_mut() {
            for &x in va.data() {
                (x >= 0.0).hash(h);
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Abs(a), out, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out = va.map(|x| if x > 0.0 { x } else { 0.0 });
        if let Some(h) = self.kinks.as_mut() {
            for &x in va.data() {
                (x > 0.0).hash(h);
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Relu(a), out, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let out = self.value(a).map(|x| c * x);
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Scale(a, c), out, rg))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[n, k] · [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, va.data(), (k as isize, 1), vb.data(), (m as isize, 1), &mut out, false);
        let out = Tensor::new(vec![n, m], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transposed()?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Transpose(a), out, rg))
    }

    /// Stride-1 2-D convolution with zero padding that preserves spatial
    /// size. `input: [B, H, W, Cin]`, `weight: [kh, kw, Cin, Cout]` (odd
    /// kernel sides), `bias: [Cout]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[3] != vw.shape()[2] {
            return Err(shape_err("conv2d", vx.shape(), vw.shape()));
        }
        let (kh, kw, cin, cout) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} must have odd sides for size-preserving padding"
            )));
        }
        if vb.shape() != [cout] {
            return Err(shape_err("conv2d bias", vb.shape(), &[cout]));
        }
        let (b, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let geom = ConvGeom { b, h, w, cin, kh, kw };
        let cols = geom.im2col(vx.data());
        let rows = b * h * w;
        let k = kh * kw * cin;
        let mut out = vec![0.0; rows * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(vb.data());
        }
        gemm(rows, k, cout, &cols, (k as isize, 1), vw.data(), (cout as isize, 1), &mut out, true);
        let out = Tensor::new(vec![b, h, w, cout], out)?;
        let rg = self.needs(&[input, weight, bias]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
            },
            out,
            rg,
        ))
    }

    /// 2× spatial downsampling by averaging 2×2 blocks.
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs [B, H, W, C] with even H and W, found {s:?}"
            )));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = va.data();
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((bi * oh + oy) * ow + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += x[i + ch];
                        }
                    }
                    for v in &mut out[o..o + c] {
                        *v *= 0.25;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, oh, ow, c], out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::AvgPool2(a), out, rg))
    }

    /// Mean over the spatial axes: `[B, H, W, C] → [B, C]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool needs [B, H, W, C], found {s:?}")));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let x = va.data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for p in 0..hw {
                let i = (bi * hw + p) * c;
                for ch in 0..c {
                    o[ch] += x[i + ch];
                }
            }
            let inv = 1.0 / hw as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::GlobalAvgPool(a), out, rg))
    }

    /// L2-normalizes along the last (channel) axis. All-zero rows stay zero.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let c = *va.shape().last().ok_or_else(|| Error::Shape("l2_normalize of a scalar".into()))?;
        let mut out = va.data().to_vec();
        let mut inv_norms = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_exact_mut(c) {
            let inv = inv_norm(row);
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norms.push(inv);
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::L2Normalize { input: a, inv_norms }, out, rg))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + wd]
                    .copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        let rg = self.needs(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), out, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), rg))
    }

    /// `Σ_i weights_i · a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let va = self.value(a);
        if weights.len() != va.numel() {
            return Err(shape_err("weighted_sum", va.shape(), &[weights.len()]));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weighted_sum weights".into()));
        }
        let s = va.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Op::WeightedSum { input: a, weights }, Tensor::scalar(s), rg))
    }

    /// Sum of the entries of `a` at flat positions `indices`.
    pub fn masked_sum(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let n = self.value(a).numel();
        let mut weights = vec![0.0; n];
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "masked_sum index {i} out of range for {n} entries"
                )));
            }
            weights[i] = 1.0;
        }
        self.weighted_sum(a, weights)
    }

    /// Softmax cross-entropy of each row of `logits: [B, M]` (or a single
    /// `[M]` vector) against its integer label, summed over rows.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let m = *vl.shape().last().ok_or_else(|| Error::Shape("cross-entropy of a scalar".into()))?;
        let rows = vl.numel() / m.max(1);
        if rows != labels.len() || m == 0 {
            return Err(shape_err("softmax_cross_entropy", vl.shape(), &[labels.len()]));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_exact_mut(m).zip(labels) {
            if y >= m {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {m} classes"
                )));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let log_z = z.ln() + max;
            loss += log_z - (row[y].ln() + max);
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    // ── reverse mode ────────────────────────────────────────────────────

    /// Populates `∂loss/∂leaf` on every gradient-enabled leaf that `loss`
    /// depends on. Repeated calls add to existing leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |ga| add_into(ga, &g));
                    self.accumulate(&mut grads, *b, |gb| add_into(gb, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(vb) {
                            *d += gi * bi;
                        }
                    });
                    self.accumulate(&mut grads, *b, |gb| {
                        for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(va) {
                            *d += gi * ai;
                        }
                    });
                }
                Op::Abs(a) => {
                    let va = self.value(*a).data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((d, gi), x) in ga.iter_mut().zip(&g).zip(va) {
                            if *x > 0.0 {
                                *d += gi;
                            } else if *x < 0.0 {
                                *d -= gi;
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let va = self.value(*a).data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((d, gi), x) in ga.iter_mut().zip(&g).zip(va) {
                            if *x > 0.0 {
                                *d += gi;
                            }
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *a, |ga| {
                        for (d, gi) in ga.iter_mut().zip(&g) {
                            *d += c * gi;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    self.accumulate(&mut grads, *a, |ga| {
                        gemm(n, m, k, &g, (m as isize, 1), vb.data(), (1, m as isize), ga, true)
                    });
                    self.accumulate(&mut grads, *b, |gb| {
                        gemm(k, n, m, va.data(), (1, k as isize), &g, (m as isize, 1), gb, true)
                    });
                }
                Op::Transpose(a) => {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    self.accumulate(&mut grads, *a, |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    cols,
                } => {
                    let (vx, vw) = (self.value(*input), self.value(*weight));
                    let (b, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let (kh, kw, cin, cout) =
                        (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
                    let geom = ConvGeom { b, h, w, cin, kh, kw };
                    let rows = b * h * w;
                    let k = kh * kw * cin;
                    self.accumulate(&mut grads, *weight, |gw| {
                        gemm(k, rows, cout, cols, (1, k as isize), &g, (cout as isize, 1), gw, true)
                    });
                    self.accumulate(&mut grads, *bias, |gb| {
                        for row in g.chunks_exact(cout) {
                            add_into(gb, row);
                        }
                    });
                    if self.node(*input).requires_grad {
                        let mut dcols = vec![0.0; rows * k];
                        gemm(rows, cout, k, &g, (cout as isize, 1), vw.data(), (1, cout as isize), &mut dcols, false);
                        self.accumulate(&mut grads, *input, |gx| geom.col2im_add(&dcols, gx));
                    }
                }
                Op::AvgPool2(a) => {
                    let s = self.shape(*a);
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    self.accumulate(&mut grads, *a, |ga| {
                        for bi in 0..b {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let o = ((bi * oh + oy) * ow + ox) * c;
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let i = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                                        for ch in 0..c {
                                            ga[i + ch] += 0.25 * g[o + ch];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.shape(*a);
                    let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                    let inv = 1.0 / hw as f64;
                    self.accumulate(&mut grads, *a, |ga| {
                        for bi in 0..b {
                            for p in 0..hw {
                                let i = (bi * hw + p) * c;
                                for ch in 0..c {
                                    ga[i + ch] += inv * g[bi * c + ch];
                                }
                            }
                        }
                    });
                }
                Op::L2Normalize { input, inv_norms } => {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap();
                    self.accumulate(&mut grads, *input, |ga| {
                        for (r, &inv) in inv_norms.iter().enumerate() {
                            if inv == 0.0 {
                                continue;
                            }
                            let span = r * c..(r + 1) * c;
                            let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, gi), yi) in ga[span].iter_mut().zip(gr).zip(yr) {
                                *d += inv * (gi - yi * dot);
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let total = *node.value.shape().last().unwrap();
                    let rows = node.value.numel() / total.max(1);
                    let mut offset = 0;
                    for &p in parts {
                        let wd = *self.shape(p).last().unwrap();
                        self.accumulate(&mut grads, p, |gp| {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * wd..(r + 1) * wd],
                                    &g[r * total + offset..r * total + offset + wd],
                                );
                            }
                        });
                        offset += wd;
                    }
                }
                Op::Reshape(a) => {
                    self.accumulate(&mut grads, *a, |ga| add_into(ga, &g));
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.accumulate(&mut grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g0));
                }
                Op::WeightedSum { input, weights } => {
                    let g0 = g[0];
                    self.accumulate(&mut grads, *input, |ga| {
                        for (d, w) in ga.iter_mut().zip(weights) {
                            *d += g0 * w;
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let g0 = g[0];
                    let m = *self.shape(*logits).last().unwrap();
                    self.accumulate(&mut grads, *logits, |ga| {
                        for (r, &y) in labels.iter().enumerate() {
                            let row = &mut ga[r * m..(r + 1) * m];
                            for (d, p) in row.iter_mut().zip(&probs[r * m..(r + 1) * m]) {
                                *d += g0 * p;
                            }
                            row[y] -= g0;
                        }
                    });
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) else { continue };
            match self.nodes[i].grad.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        f(slot);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Reciprocal Euclidean norm of `row`, or zero when the row is all zeros.
pub(crate) fn inv_norm(row: &[f64]) -> f64 {
    let sq: f64 = row.iter().map(|v| v * v).sum();
    if sq > 0.0 {
        1.0 / sq.sqrt()
    } else {
        0.0
    }
}

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    /// Rows are output pixels `(b, y, x)`; columns are `(ky, kx, cin)`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let &ConvGeom { b, h, w, cin, kh, kw } = self;
        let k = kh * kw * cin;
        let (ph, pw) = (kh / 2, kw / 2);
        let mut cols = vec![0.0; b * h * w * k];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((bi * h + y) * w + xx) * k;
                    for ky in 0..kh {
                        let Some(iy) = (y + ky).checked_sub(ph).filter(|&v| v < h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = (xx + kx).checked_sub(pw).filter(|&v| v < w) else { continue };
                            let src = ((bi * h + iy) * w + ix) * cin;
                            let dst = row + (ky * kw + kx) * cin;
                            cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        let &ConvGeom { b, h, w, cin, kh, kw } = self;
        let k = kh * kw * cin;
        let (ph, pw) = (kh / 2, kw / 2);
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((bi * h + y) * w + xx) * k;
                    for ky in 0..kh {
                        let Some(iy) = (y + ky).checked_sub(ph).filter(|&v| v < h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = (xx + kx).checked_sub(pw).filter(|&v| v < w) else { continue };
                            let dst = ((bi * h + iy) * w + ix) * cin;
                            let src = row + (ky * kw + kx) * cin;
                            add_into(&mut gx[dst..dst + cin], &cols[src..src + cin]);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> NodeId {
        g.param(Tensor::from_vec(v.to_vec())).unwrap()
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[-1.0, 0.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[3.0, 4.0]);
        let y = g.l2_normalize(x).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn l2_normalize_zero_vector_is_zero() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0, 0.0, 0.0]);
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_m() {
        for m in [2usize, 5, 24] {
            let mut g = Graph::new();
            let x = vec_leaf(&mut g, &vec![1.7; m]);
            let l = g.softmax_cross_entropy(x, &[m - 1]).unwrap();
            assert_abs_diff_eq!(g.value(l).item().unwrap(), (m as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let mut g = Graph::new();
        let err = g.constant(Tensor::from_vec(vec![1.0, f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0, 1.0]);
        assert!(g.softmax_cross_entropy(x, &[2]).is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(&[2, 3, 4], 0.3)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.data_mut()[4] = 1.0;
        let w = g.param(k).unwrap();
        let b = g.param(Tensor::from_vec(vec![0.5])).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn concat_then_pool_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(&[2, 4, 4, 3], 1.0)).unwrap();
        let b = g.constant(Tensor::filled(&[2, 4, 4, 2], 2.0)).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 4, 5]);
        let p = g.avg_pool2(c).unwrap();
        assert_eq!(g.shape(p), &[2, 2, 2, 5]);
        let q = g.global_avg_pool(p).unwrap();
        assert_eq!(g.value(q).row(1), &[1.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
