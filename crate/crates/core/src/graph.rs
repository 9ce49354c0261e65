//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] is built fresh for every forward pass: leaves are either
//! `param` (gradients tracked) or `constant` (inputs, augmented views, frozen
//! prototypes). Ops evaluate eagerly, so intermediate values can be inspected
//! while the graph is being assembled, and [`Graph::backward`] walks the tape
//! once in reverse to produce gradients for every parameter leaf.
//!
//! The op set is exactly what the model and losses need: dense/conv layers,
//! elementwise arithmetic, reductions, and numerically stabilized
//! log-sum-exp / softmax-cross-entropy kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Matmul(VarId, VarId),
    BiasAdd(VarId, VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    },
    Relu(VarId),
    Reshape(VarId),
    Row(VarId, usize),
    SumAll(VarId),
    MeanAll(VarId),
    L1All(VarId),
    Stack(Vec<VarId>),
    LogSumExp(VarId),
    CosineSim(VarId, VarId),
    SoftmaxCrossEntropy { logits: VarId, labels: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by the tape position of each node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf treated as a constant: no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf, t, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    /// `[B,m] x [m,n] -> [B,n]`
    pub fn matmul(&mut self, x: VarId, w: VarId) -> VarId {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(vw.shape().len(), 2, "matmul rhs must be 2-d");
        let (bsz, m) = (vx.shape()[0], vx.shape()[1]);
        let (m2, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(m, m2, "matmul inner dims differ");
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![0.0; bsz * n];
        for bi in 0..bsz {
            let xrow = &xd[bi * m..(bi + 1) * m];
            let orow = &mut out[bi * n..(bi + 1) * n];
            for (k, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[k * n..(k + 1) * n];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Op::Matmul(x, w),
            Tensor::new(vec![bsz, n], out).unwrap(),
            rg,
        )
    }

    /// `[B,n] + [n]` broadcast over the leading axis.
    pub fn bias_add(&mut self, x: VarId, b: VarId) -> VarId {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = *vx.shape().last().unwrap();
        assert_eq!(vb.shape(), &[n], "bias length mismatch");
        let bd = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data).unwrap();
        let rg = self.rg(x) || self.rg(b);
        self.push(Op::BiasAdd(x, b), out, rg)
    }

    /// `x [B,Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let [bsz, cin, h, wd_] = four(vx.shape(), "conv2d input");
        let [cout, cin2, kh, kw] = four(vw.shape(), "conv2d weight");
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(vb.shape(), &[cout], "conv2d bias mismatch");
        let oh = conv_out(h, kh, stride, pad);
        let ow = conv_out(wd_, kw, stride, pad);
        let (xd, wdat, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![0.0; bsz * cout * oh * ow];
        for bi in 0..bsz {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bd[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                let xbase = ((bi * cin + ci) * h + iy) * wd_;
                                let wbase = ((co * cin + ci) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wd_ {
                                        continue;
                                    }
                                    acc += xd[xbase + (ix - pad)] * wdat[wbase + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Op::Conv2d { x, w, b, stride, pad },
            Tensor::new(vec![bsz, cout, oh, ow], out).unwrap(),
            rg,
        )
    }

    /// Transposed convolution, the exact adjoint of [`Graph::conv2d`] with the
    /// same `(stride, pad)`: `x [B,Cin,Hi,Wi]`, `w [Cin,Cout,kh,kw]`, output
    /// size given explicitly so encoder shapes can be mirrored for any input.
    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> VarId {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let [bsz, cin, hi, wi] = four(vx.shape(), "conv_transpose2d input");
        let [cin2, cout, kh, kw] = four(vw.shape(), "conv_transpose2d weight");
        assert_eq!(cin, cin2, "conv_transpose2d channel mismatch");
        assert_eq!(vb.shape(), &[cout], "conv_transpose2d bias mismatch");
        assert_eq!(
            conv_out(out_h, kh, stride, pad),
            hi,
            "conv_transpose2d output height does not mirror input"
        );
        assert_eq!(
            conv_out(out_w, kw, stride, pad),
            wi,
            "conv_transpose2d output width does not mirror input"
        );
        let (xd, wdat, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![0.0; bsz * cout * out_h * out_w];
        for (bi, chunk) in out.chunks_mut(cout * out_h * out_w).enumerate() {
            for co in 0..cout {
                let plane = &mut chunk[co * out_h * out_w..(co + 1) * out_h * out_w];
                plane.iter_mut().for_each(|v| *v = bd[co]);
            }
            for ci in 0..cin {
                for iy in 0..hi {
                    for ix in 0..wi {
                        let v = xd[((bi * cin + ci) * hi + iy) * wi + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for co in 0..cout {
                            for ky in 0..kh {
                                let oy = iy * stride + ky;
                                if oy < pad || oy - pad >= out_h {
                                    continue;
                                }
                                let oy = oy - pad;
                                let obase = (co * out_h + oy) * out_w;
                                let wbase = ((ci * cout + co) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ox = ix * stride + kx;
                                    if ox < pad || ox - pad >= out_w {
                                        continue;
                                    }
                                    chunk[obase + (ox - pad)] += v * wdat[wbase + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
                out_h,
                out_w,
            },
            Tensor::new(vec![bsz, cout, out_h, out_w], out).unwrap(),
            rg,
        )
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let out = self.value(a).reshaped(shape).expect("reshape size mismatch");
        let rg = self.rg(a);
        self.push(Op::Reshape(a), out, rg)
    }

    /// Row `i` of a `[B,D]` matrix as a `[D]` vector.
    pub fn row(&mut self, a: VarId, i: usize) -> VarId {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2, "row() needs a 2-d tensor");
        let d = va.shape()[1];
        assert!(i < va.shape()[0], "row index out of range");
        let data = va.data()[i * d..(i + 1) * d].to_vec();
        let rg = self.rg(a);
        self.push(Op::Row(a, i), Tensor::new(vec![d], data).unwrap(), rg)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let s: f64 = va.data().iter().sum();
        let m = s / va.numel() as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), Tensor::scalar(m), rg)
    }

    /// Sum of absolute values over every element.
    pub fn l1_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().map(|v| v.abs()).sum();
        let rg = self.rg(a);
        self.push(Op::L1All(a), Tensor::scalar(s), rg)
    }

    /// Stacks scalar vars into a `[n]` vector.
    pub fn stack_scalars(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty(), "stack of zero scalars");
        let data: Vec<f64> = ids
            .iter()
            .map(|&id| {
                let v = self.value(id);
                assert_eq!(v.numel(), 1, "stack_scalars expects scalar vars");
                v.item()
            })
            .collect();
        let rg = ids.iter().any(|&id| self.rg(id));
        self.push(Op::Stack(ids.to_vec()), Tensor::from_vec(data), rg)
    }

    /// Max-subtracted log-sum-exp of a vector, returning a scalar.
    pub fn logsumexp(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let m = va.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = va.data().iter().map(|&x| (x - m).exp()).sum();
        let rg = self.rg(a);
        self.push(Op::LogSumExp(a), Tensor::scalar(m + s.ln()), rg)
    }

    /// Cosine similarity of two equally sized vectors, as a scalar var.
    ///
    /// Errors when either vector has zero norm (cosine undefined).
    pub fn cosine_sim(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.numel(), vb.numel(), "cosine_sim length mismatch");
        let na = norm(va.data());
        let nb = norm(vb.data());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::config(
                "degenerate embedding: zero-norm vector in cosine similarity",
            ));
        }
        let dot: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::CosineSim(a, b), Tensor::scalar(dot / (na * nb)), rg))
    }

    /// Mean softmax cross-entropy over a `[B,N]` logit matrix.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> VarId {
        let v = self.value(logits);
        assert_eq!(v.shape().len(), 2, "logits must be [B,N]");
        let (bsz, n) = (v.shape()[0], v.shape()[1]);
        assert_eq!(labels.len(), bsz, "label count mismatch");
        let mut total = 0.0;
        for (bi, &y) in labels.iter().enumerate() {
            assert!(y < n, "label out of range");
            let row = &v.data()[bi * n..(bi + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[y];
        }
        let rg = self.rg(logits);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(total / bsz as f64),
            rg,
        )
    }

    /// Sums a non-empty list of scalar vars.
    pub fn sum_scalars(&mut self, ids: &[VarId]) -> VarId {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        acc
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; only
    /// nodes on a `requires_grad` path receive one.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_assign(ga, g.data(), 1.0));
                self.acc(grads, *b, |gb| add_assign(gb, g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_assign(ga, g.data(), 1.0));
                self.acc(grads, *b, |gb| add_assign(gb, g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g.data()).zip(vb) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g.data()).zip(va) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| add_assign(ga, g.data(), *c));
            }
            Op::Matmul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (bsz, m) = (vx.shape()[0], vx.shape()[1]);
                let n = vw.shape()[1];
                let (xd, wd, gd) = (vx.data(), vw.data(), g.data());
                self.acc(grads, *x, |gx| {
                    for bi in 0..bsz {
                        for k in 0..m {
                            let mut acc = 0.0;
                            let grow = &gd[bi * n..(bi + 1) * n];
                            let wrow = &wd[k * n..(k + 1) * n];
                            for (gv, wv) in grow.iter().zip(wrow) {
                                acc += gv * wv;
                            }
                            gx[bi * m + k] += acc;
                        }
                    }
                });
                self.acc(grads, *w, |gw| {
                    for bi in 0..bsz {
                        let grow = &gd[bi * n..(bi + 1) * n];
                        for k in 0..m {
                            let xv = xd[bi * m + k];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &mut gw[k * n..(k + 1) * n];
                            for (o, gv) in wrow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                });
            }
            Op::BiasAdd(x, b) => {
                let n = self.value(*b).numel();
                self.acc(grads, *x, |gx| add_assign(gx, g.data(), 1.0));
                self.acc(grads, *b, |gb| {
                    for (i, gv) in g.data().iter().enumerate() {
                        gb[i % n] += gv;
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backprop_conv2d(*x, *w, *b, *stride, *pad, g, grads);
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
                out_h,
                out_w,
            } => {
                self.backprop_conv_transpose2d(*x, *w, *b, *stride, *pad, *out_h, *out_w, g, grads);
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for ((o, gv), av) in ga.iter_mut().zip(g.data()).zip(va) {
                        if *av > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |ga| add_assign(ga, g.data(), 1.0));
            }
            Op::Row(a, i) => {
                let d = self.value(*a).shape()[1];
                let i = *i;
                self.acc(grads, *a, |ga| {
                    for (o, gv) in ga[i * d..(i + 1) * d].iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                });
            }
            Op::SumAll(a) => {
                let g0 = g.item();
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g0));
            }
            Op::MeanAll(a) => {
                let g0 = g.item() / self.value(*a).numel() as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g0));
            }
            Op::L1All(a) => {
                let g0 = g.item();
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for (o, av) in ga.iter_mut().zip(va) {
                        *o += g0 * av.signum() * (*av != 0.0) as u8 as f64;
                    }
                });
            }
            Op::Stack(ids) => {
                for (k, &id) in ids.iter().enumerate() {
                    let gk = g.data()[k];
                    self.acc(grads, id, |gi| gi[0] += gk);
                }
            }
            Op::LogSumExp(a) => {
                let g0 = g.item();
                let lse = node.value.item();
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for (o, &av) in ga.iter_mut().zip(va) {
                        *o += g0 * (av - lse).exp();
                    }
                });
            }
            Op::CosineSim(a, b) => {
                let g0 = g.item();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (norm(va), norm(vb));
                let cos = node.value.item();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g0 * (vb[i] / (na * nb) - cos * va[i] / (na * na));
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g0 * (va[i] / (na * nb) - cos * vb[i] / (nb * nb));
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let g0 = g.item();
                let v = self.value(*logits);
                let (bsz, n) = (v.shape()[0], v.shape()[1]);
                let vd = v.data();
                self.acc(grads, *logits, |gl| {
                    for (bi, &y) in labels.iter().enumerate() {
                        let row = &vd[bi * n..(bi + 1) * n];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&z| (z - m).exp()).sum();
                        let grow = &mut gl[bi * n..(bi + 1) * n];
                        for (j, o) in grow.iter_mut().enumerate() {
                            let p = (row[j] - m).exp() / denom;
                            let ind = (j == y) as u8 as f64;
                            *o += g0 * (p - ind) / bsz as f64;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let [bsz, cin, h, wd_] = four(vx.shape(), "conv2d input");
        let [cout, _, kh, kw] = four(vw.shape(), "conv2d weight");
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let (xd, wdat, gd) = (vx.data(), vw.data(), g.data());
        self.acc(grads, x, |gx| {
            for bi in 0..bsz {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[((bi * cout + co) * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    let xbase = ((bi * cin + ci) * h + iy) * wd_;
                                    let wbase = ((co * cin + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < pad || ix - pad >= wd_ {
                                            continue;
                                        }
                                        gx[xbase + (ix - pad)] += gv * wdat[wbase + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.acc(grads, w, |gw| {
            for bi in 0..bsz {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[((bi * cout + co) * oh + oy) * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    let xbase = ((bi * cin + ci) * h + iy) * wd_;
                                    let wbase = ((co * cin + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < pad || ix - pad >= wd_ {
                                            continue;
                                        }
                                        gw[wbase + kx] += gv * xd[xbase + (ix - pad)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.acc(grads, b, |gb| {
            for bi in 0..bsz {
                for co in 0..cout {
                    let base = (bi * cout + co) * oh * ow;
                    gb[co] += gd[base..base + oh * ow].iter().sum::<f64>();
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv_transpose2d(
        &self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let [bsz, cin, hi, wi] = four(vx.shape(), "conv_transpose2d input");
        let [_, cout, kh, kw] = four(vw.shape(), "conv_transpose2d weight");
        let (xd, wdat, gd) = (vx.data(), vw.data(), g.data());
        self.acc(grads, x, |gx| {
            for bi in 0..bsz {
                for ci in 0..cin {
                    for iy in 0..hi {
                        for ix in 0..wi {
                            let mut acc = 0.0;
                            for co in 0..cout {
                                for ky in 0..kh {
                                    let oy = iy * stride + ky;
                                    if oy < pad || oy - pad >= out_h {
                                        continue;
                                    }
                                    let oy = oy - pad;
                                    let gbase = ((bi * cout + co) * out_h + oy) * out_w;
                                    let wbase = ((ci * cout + co) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ox = ix * stride + kx;
                                        if ox < pad || ox - pad >= out_w {
                                            continue;
                                        }
                                        acc += gd[gbase + (ox - pad)] * wdat[wbase + kx];
                                    }
                                }
                            }
                            gx[((bi * cin + ci) * hi + iy) * wi + ix] += acc;
                        }
                    }
                }
            }
        });
        self.acc(grads, w, |gw| {
            for bi in 0..bsz {
                for ci in 0..cin {
                    for iy in 0..hi {
                        for ix in 0..wi {
                            let xv = xd[((bi * cin + ci) * hi + iy) * wi + ix];
                            if xv == 0.0 {
                                continue;
                            }
                            for co in 0..cout {
                                for ky in 0..kh {
                                    let oy = iy * stride + ky;
                                    if oy < pad || oy - pad >= out_h {
                                        continue;
                                    }
                                    let oy = oy - pad;
                                    let gbase = ((bi * cout + co) * out_h + oy) * out_w;
                                    let wbase = ((ci * cout + co) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ox = ix * stride + kx;
                                        if ox < pad || ox - pad >= out_w {
                                            continue;
                                        }
                                        gw[wbase + kx] += xv * gd[gbase + (ox - pad)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.acc(grads, b, |gb| {
            for bi in 0..bsz {
                for co in 0..cout {
                    let base = (bi * cout + co) * out_h * out_w;
                    gb[co] += gd[base..base + out_h * out_w].iter().sum::<f64>();
                }
            }
        });
    }

    /// Runs `f` on the gradient buffer of `id`, creating it on first touch.
    /// Constant leaves and pure-constant subtrees are skipped.
    fn acc<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Tensor>], id: VarId, f: F) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

fn conv_out(sz: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(sz + 2 * pad >= k, "kernel larger than padded input");
    (sz + 2 * pad - k) / stride + 1
}

/// Output spatial size of a stride/pad convolution; shared with the model
/// layer so encoder/decoder shapes stay mirrored.
pub fn conv_output_size(sz: usize, k: usize, stride: usize, pad: usize) -> usize {
    conv_out(sz, k, stride, pad)
}

fn four(shape: &[usize], what: &str) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "{what} must be 4-d, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn add_assign(dst: &mut [f64], src: &[f64], scale: f64) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s * scale;
    }
}
