//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a define-by-run graph of f64 tensor ops. The op set is
//! exactly what the segmentation/adaptation networks need: convolutions,
//! normalization, pooling, bilinear resize, gating, concatenation, pointwise
//! nonlinearities, and scalar reductions. Every backward rule is covered by a
//! central-difference gradient check in the test suite.
//!
//! Reductions and scatter operations run in a fixed order, so identical
//! inputs produce bit-identical values and gradients run-to-run.

use crate::error::{Error, Result};
use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MaxElem(TensorId, TensorId),
    AddN(Vec<TensorId>),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Relu(TensorId),
    LeakyRelu(TensorId, f64),
    Sigmoid(TensorId),
    Exp(TensorId),
    LnClamped(TensorId, f64),
    Clamp(TensorId, f64, f64),
    SoftmaxCh(TensorId),
    BiasAdd(TensorId, TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: TensorId,
        w: TensorId,
    },
    NormBatch {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    AvgPoolBins {
        x: TensorId,
        oh: usize,
        ow: usize,
    },
    Gap(TensorId),
    UpsampleBilinear {
        x: TensorId,
        oh: usize,
        ow: usize,
    },
    ConcatCh(Vec<TensorId>),
    BroadcastPlane(TensorId),
    ChannelGate {
        x: TensorId,
        g: TensorId,
    },
    SpatialGate {
        x: TensorId,
        g: TensorId,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    SumCh(TensorId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run graph. Create one per forward pass; drop it afterwards.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::with_capacity(128),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> TensorId {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant input; no gradient is tracked for it.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Input that should receive a gradient (parameters, gradcheck probes).
    pub fn leaf_grad(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise maximum; ties route the gradient to the first input.
    pub fn max_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let mut v = self.nodes[a].value.clone();
        v.zip_mut_with(&self.nodes[b].value, |x, &y| {
            if y > *x {
                *x = y;
            }
        });
        let rg = self.req(a) || self.req(b);
        self.push(v, Op::MaxElem(a, b), rg)
    }

    /// Sum of any number of same-shaped tensors, reduced in argument order.
    pub fn add_n(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty());
        let mut v = self.nodes[xs[0]].value.clone();
        for &x in &xs[1..] {
            v += &self.nodes[x].value;
        }
        let rg = xs.iter().any(|&x| self.req(x));
        self.push(v, Op::AddN(xs.to_vec()), rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = &self.nodes[a].value * c;
        let rg = self.req(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = &self.nodes[a].value + c;
        let rg = self.req(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let rg = self.req(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: TensorId, alpha: f64) -> TensorId {
        let v = self.nodes[a].value.mapv(|x| if x >= 0.0 { x } else { alpha * x });
        let rg = self.req(a);
        self.push(v, Op::LeakyRelu(a, alpha), rg)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a].value.mapv(sigmoid_scalar);
        let rg = self.req(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a].value.mapv(f64::exp);
        let rg = self.req(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// `ln(max(x, eps))`; the clamped region gets zero gradient.
    pub fn ln_clamped(&mut self, a: TensorId, eps: f64) -> TensorId {
        let v = self.nodes[a].value.mapv(|x| x.max(eps).ln());
        let rg = self.req(a);
        self.push(v, Op::LnClamped(a, eps), rg)
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let v = self.nodes[a].value.mapv(|x| x.clamp(lo, hi));
        let rg = self.req(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    /// Softmax over channel axis (axis 1) of a `[B, C, H, W]` tensor.
    pub fn softmax_ch(&mut self, a: TensorId) -> TensorId {
        let x = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("softmax_ch expects 4-d input");
        let v = softmax_channels(&x.to_owned());
        let rg = self.req(a);
        self.push(v.into_dyn(), Op::SoftmaxCh(a), rg)
    }

    /// Adds a bias vector over axis 1 of a 2-d or 4-d tensor.
    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let bv = self.nodes[b].value.clone();
        let blen = bv.len();
        debug_assert_eq!(self.shape(x)[1], blen);
        let mut v = self.nodes[x].value.clone();
        {
            let bs = bv.as_slice().unwrap();
            match v.ndim() {
                2 => {
                    let mut v2 = v.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for mut row in v2.rows_mut() {
                        for (e, &bb) in row.iter_mut().zip(bs.iter()) {
                            *e += bb;
                        }
                    }
                }
                4 => {
                    let mut v4 = v.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for b_i in 0..v4.shape()[0] {
                        for c in 0..blen {
                            v4.index_axis_mut(Axis(0), b_i)
                                .index_axis_mut(Axis(0), c)
                                .mapv_inplace(|e| e + bs[c]);
                        }
                    }
                }
                d => panic!("bias_add expects 2-d or 4-d input, got {d}-d"),
            }
        }
        let rg = self.req(x) || self.req(b);
        self.push(v, Op::BiasAdd(x, b), rg)
    }

    /// 2-d convolution, floor output size semantics.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().unwrap();
        let v = conv2d_forward(&xv.to_owned(), &wv.to_owned(), stride, pad);
        let rg = self.req(x) || self.req(w);
        self.push(v.into_dyn(), Op::Conv2d { x, w, stride, pad }, rg)
    }

    /// `x [B, F] · w [O, F]^T -> [B, O]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = xv.dot(&wv.t());
        let rg = self.req(x) || self.req(w);
        self.push(v.into_dyn(), Op::Linear { x, w }, rg)
    }

    /// Normalization with per-channel affine terms; statistics are computed
    /// over `(B, H, W)` of the current batch, so at batch size 1 they are
    /// per-instance.
    pub fn norm_batch(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let g = self.nodes[gamma].value.clone();
        let b = self.nodes[beta].value.clone();
        let (v, _, _) = norm_batch_forward(&xv, g.as_slice().unwrap(), b.as_slice().unwrap(), eps);
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(v.into_dyn(), Op::NormBatch { x, gamma, beta, eps }, rg)
    }

    /// Adaptive average pooling onto an `oh x ow` grid of disjoint cells.
    pub fn avg_pool_bins(&mut self, x: TensorId, oh: usize, ow: usize) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let v = avg_pool_bins_forward(&xv, oh, ow);
        let rg = self.req(x);
        self.push(v.into_dyn(), Op::AvgPoolBins { x, oh, ow }, rg)
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn gap(&mut self, x: TensorId) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut v = Array2::<f64>::zeros((bsz, c));
        for bi in 0..bsz {
            for ci in 0..c {
                let mut s = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        s += xv[[bi, ci, hi, wi]];
                    }
                }
                v[[bi, ci]] = s / (h * w) as f64;
            }
        }
        let rg = self.req(x);
        self.push(v.into_dyn(), Op::Gap(x), rg)
    }

    /// Bilinear resize to `oh x ow` (half-pixel centers, edges clamped).
    pub fn upsample_bilinear(&mut self, x: TensorId, oh: usize, ow: usize) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let v = upsample_bilinear_forward(&xv, oh, ow);
        let rg = self.req(x);
        self.push(v.into_dyn(), Op::UpsampleBilinear { x, oh, ow }, rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat_ch(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs
            .iter()
            .map(|&x| self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap())
            .collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_ch shape mismatch");
        let rg = xs.iter().any(|&x| self.req(x));
        self.push(v.into_dyn(), Op::ConcatCh(xs.to_vec()), rg)
    }

    /// Broadcast a latent vector `[B, L]` to a plane map `[B, L, H, W]`.
    pub fn broadcast_plane(&mut self, z: TensorId, h: usize, w: usize) -> TensorId {
        let zv = self.nodes[z].value.view().into_dimensionality::<Ix2>().unwrap();
        let (bsz, l) = (zv.shape()[0], zv.shape()[1]);
        let mut v = Array4::<f64>::zeros((bsz, l, h, w));
        for bi in 0..bsz {
            for li in 0..l {
                v.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), li)
                    .fill(zv[[bi, li]]);
            }
        }
        let rg = self.req(z);
        self.push(v.into_dyn(), Op::BroadcastPlane(z), rg)
    }

    /// Multiply each channel of `x [B, C, H, W]` by a gate `g [B, C]`.
    pub fn channel_gate(&mut self, x: TensorId, g: TensorId) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let gv = self.nodes[g].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut v = xv;
        for bi in 0..v.shape()[0] {
            for ci in 0..v.shape()[1] {
                let gate = gv[[bi, ci]];
                v.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|e| e * gate);
            }
        }
        let rg = self.req(x) || self.req(g);
        self.push(v.into_dyn(), Op::ChannelGate { x, g }, rg)
    }

    /// Multiply every channel of `x [B, C, H, W]` by a gate `g [B, 1, H, W]`.
    pub fn spatial_gate(&mut self, x: TensorId, g: TensorId) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let gv = self.nodes[g].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        debug_assert_eq!(gv.shape()[1], 1);
        let mut v = xv;
        for bi in 0..v.shape()[0] {
            for ci in 0..v.shape()[1] {
                let gplane = gv.index_axis(Axis(0), bi);
                let gplane = gplane.index_axis(Axis(0), 0);
                let mut plane = v.index_axis_mut(Axis(0), bi);
                let mut plane = plane.index_axis_mut(Axis(0), ci);
                plane.zip_mut_with(&gplane, |e, &gg| *e *= gg);
            }
        }
        let rg = self.req(x) || self.req(g);
        self.push(v.into_dyn(), Op::SpatialGate { x, g }, rg)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x].value.sum();
        let rg = self.req(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x].value.len() as f64;
        let s = self.nodes[x].value.sum() / n;
        let rg = self.req(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::MeanAll(x), rg)
    }

    /// Sum over the channel axis: `[B, C, H, W] -> [B, 1, H, W]`.
    pub fn sum_ch(&mut self, x: TensorId) -> TensorId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut v = Array4::<f64>::zeros((bsz, 1, h, w));
        for bi in 0..bsz {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        v[[bi, 0, hi, wi]] += xv[[bi, ci, hi, wi]];
                    }
                }
            }
        }
        let rg = self.req(x);
        self.push(v.into_dyn(), Op::SumCh(x), rg)
    }

    /// Backpropagate from a single-element `loss` node. Returns one gradient
    /// slot per node; only nodes with `requires_grad` are populated.
    pub fn backward(&self, loss: TensorId) -> Result<Grads> {
        if !self.grad_enabled {
            return Err(Error::Train("backward on a no-grad tape".into()));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Train("backward expects a scalar loss".into()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(ArrayD::from_elem(self.nodes[loss].value.raw_dim(), 1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { slots: grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<ArrayD<f64>>],
        target: TensorId,
        delta: ArrayD<f64>,
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, id: TensorId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * &self.nodes[*b].value);
                self.accumulate(grads, *b, g * &self.nodes[*a].value);
            }
            Op::MaxElem(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut ga = g.clone();
                let mut gb = g.clone();
                for ((ga_e, gb_e), (ae, be)) in ga
                    .iter_mut()
                    .zip(gb.iter_mut())
                    .zip(av.iter().zip(bv.iter()))
                {
                    if ae >= be {
                        *gb_e = 0.0;
                    } else {
                        *ga_e = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.accumulate(grads, x, g.clone());
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g * *c);
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g * &mask);
            }
            Op::LeakyRelu(a, alpha) => {
                let alpha = *alpha;
                let mask = self.nodes[*a]
                    .value
                    .mapv(|x| if x >= 0.0 { 1.0 } else { alpha });
                self.accumulate(grads, *a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[id].value;
                self.accumulate(grads, *a, g * &(s * &s.mapv(|x| 1.0 - x)));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g * &self.nodes[id].value);
            }
            Op::LnClamped(a, eps) => {
                let eps = *eps;
                let d = self.nodes[*a]
                    .value
                    .mapv(|x| if x >= eps { 1.0 / x } else { 0.0 });
                self.accumulate(grads, *a, g * &d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = self.nodes[*a]
                    .value
                    .mapv(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g * &d);
            }
            Op::SoftmaxCh(a) => {
                let s = self.nodes[id].value.view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
                let mut out = Array4::<f64>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for hi in 0..h {
                        for wi in 0..w {
                            let mut dot = 0.0;
                            for ci in 0..c {
                                dot += g4[[bi, ci, hi, wi]] * s[[bi, ci, hi, wi]];
                            }
                            for ci in 0..c {
                                out[[bi, ci, hi, wi]] =
                                    s[[bi, ci, hi, wi]] * (g4[[bi, ci, hi, wi]] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, out.into_dyn());
            }
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let blen = self.nodes[*b].value.len();
                let mut gb = vec![0.0; blen];
                match g.ndim() {
                    2 => {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        for row in g2.rows() {
                            for (acc, &e) in gb.iter_mut().zip(row.iter()) {
                                *acc += e;
                            }
                        }
                    }
                    4 => {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        for bi in 0..g4.shape()[0] {
                            for (ci, acc) in gb.iter_mut().enumerate() {
                                *acc += g4.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum();
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                self.accumulate(
                    grads,
                    *b,
                    ArrayD::from_shape_vec(IxDyn(&[blen]), gb).unwrap(),
                );
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let want_gx = self.nodes[*x].requires_grad;
                let want_gw = self.nodes[*w].requires_grad;
                let (gx, gw) = conv2d_backward(&xv, &wv, &g4, *stride, *pad, want_gx, want_gw);
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw.into_dyn());
                }
            }
            Op::Linear { x, w } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                self.accumulate(grads, *x, g2.dot(&wv).into_dyn());
                self.accumulate(grads, *w, g2.t().dot(&xv).into_dyn());
            }
            Op::NormBatch { x, gamma, beta, eps } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let gm = self.nodes[*gamma].value.clone();
                let bt = self.nodes[*beta].value.clone();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let (gx, ggamma, gbeta) = norm_batch_backward(
                    &xv,
                    gm.as_slice().unwrap(),
                    bt.as_slice().unwrap(),
                    *eps,
                    &g4,
                );
                self.accumulate(grads, *x, gx.into_dyn());
                let cdim = ggamma.len();
                self.accumulate(
                    grads,
                    *gamma,
                    ArrayD::from_shape_vec(IxDyn(&[cdim]), ggamma).unwrap(),
                );
                self.accumulate(
                    grads,
                    *beta,
                    ArrayD::from_shape_vec(IxDyn(&[cdim]), gbeta).unwrap(),
                );
            }
            Op::AvgPoolBins { x, oh, ow } => {
                let xshape = self.nodes[*x].value.shape().to_vec();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let gx = avg_pool_bins_backward(&xshape, *oh, *ow, &g4);
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::Gap(x) => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let scale = 1.0 / (h * w) as f64;
                let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for ci in 0..c {
                        gx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(g2[[bi, ci]] * scale);
                    }
                }
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::UpsampleBilinear { x, oh, ow } => {
                let xshape = self.nodes[*x].value.shape().to_vec();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let gx = upsample_bilinear_backward(&xshape, *oh, *ow, &g4);
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::ConcatCh(xs) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let c = self.nodes[x].value.shape()[1];
                    let part = g4
                        .slice(ndarray::s![.., offset..offset + c, .., ..])
                        .to_owned();
                    self.accumulate(grads, x, part.into_dyn());
                    offset += c;
                }
            }
            Op::BroadcastPlane(z) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, l) = (g4.shape()[0], g4.shape()[1]);
                let mut gz = Array2::<f64>::zeros((bsz, l));
                for bi in 0..bsz {
                    for li in 0..l {
                        gz[[bi, li]] = g4.index_axis(Axis(0), bi).index_axis(Axis(0), li).sum();
                    }
                }
                self.accumulate(grads, *z, gz.into_dyn());
            }
            Op::ChannelGate { x, g: gate } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = self.nodes[*gate].value.view().into_dimensionality::<Ix2>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, c) = (gv.shape()[0], gv.shape()[1]);
                let mut gx = g4.to_owned();
                let mut gg = Array2::<f64>::zeros((bsz, c));
                for bi in 0..bsz {
                    for ci in 0..c {
                        let gout_b = g4.index_axis(Axis(0), bi);
                        let gout = gout_b.index_axis(Axis(0), ci);
                        let xin_b = xv.index_axis(Axis(0), bi);
                        let xin = xin_b.index_axis(Axis(0), ci);
                        gg[[bi, ci]] = (&gout * &xin).sum();
                        gx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .mapv_inplace(|e| e * gv[[bi, ci]]);
                    }
                }
                self.accumulate(grads, *x, gx.into_dyn());
                self.accumulate(grads, *gate, gg.into_dyn());
            }
            Op::SpatialGate { x, g: gate } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = self.nodes[*gate].value.view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
                let mut gg = Array4::<f64>::zeros((bsz, 1, h, w));
                for bi in 0..bsz {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let go = g4[[bi, ci, hi, wi]];
                                gx[[bi, ci, hi, wi]] = go * gv[[bi, 0, hi, wi]];
                                gg[[bi, 0, hi, wi]] += go * xv[[bi, ci, hi, wi]];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx.into_dyn());
                self.accumulate(grads, *gate, gg.into_dyn());
            }
            Op::SumAll(x) => {
                let s = g.iter().copied().next().unwrap();
                let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), s);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].value.len() as f64;
                let s = g.iter().copied().next().unwrap() / n;
                let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), s);
                self.accumulate(grads, *x, gx);
            }
            Op::SumCh(x) => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                gx[[bi, ci, hi, wi]] = g4[[bi, 0, hi, wi]];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx.into_dyn());
            }
        }
    }
}

/// Gradient slots produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<ArrayD<f64>> {
        self.slots.get_mut(id).and_then(|s| s.take())
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable channelwise softmax on a `[B, C, H, W]` array.
pub fn softmax_channels(x: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array4::<f64>::zeros((bsz, c, h, w));
    for bi in 0..bsz {
        for hi in 0..h {
            for wi in 0..w {
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(x[[bi, ci, hi, wi]]);
                }
                let mut denom = 0.0;
                for ci in 0..c {
                    let e = (x[[bi, ci, hi, wi]] - m).exp();
                    out[[bi, ci, hi, wi]] = e;
                    denom += e;
                }
                for ci in 0..c {
                    out[[bi, ci, hi, wi]] /= denom;
                }
            }
        }
    }
    out
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        n + 2 * pad >= k,
        "conv kernel {k} exceeds padded input extent {}",
        n + 2 * pad
    );
    (n + 2 * pad - k) / stride + 1
}

/// im2col: `[Cin, H, W]` slice -> `[Cin*KH*KW, OH*OW]` matrix.
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (bsz, cin, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wdt, kw, stride, pad);
    let w2 = w.view().into_shape((cout, cin * kh * kw)).unwrap();
    let mut out = Array4::<f64>::zeros((bsz, cout, oh, ow));
    for bi in 0..bsz {
        let xb = x.index_axis(Axis(0), bi);
        let res = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            let xm = xb.into_shape((cin, h * wdt)).unwrap();
            w2.dot(&xm)
        } else {
            let col = im2col(&xb, kh, kw, stride, pad, oh, ow);
            w2.dot(&col)
        };
        out.index_axis_mut(Axis(0), bi)
            .assign(&res.into_shape((cout, oh, ow)).unwrap());
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    gout: &Array4<f64>,
    stride: usize,
    pad: usize,
    want_gx: bool,
    want_gw: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>) {
    let (bsz, cin, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let w2 = w.view().into_shape((cout, cin * kh * kw)).unwrap();
    let mut gx = want_gx.then(|| Array4::<f64>::zeros((bsz, cin, h, wdt)));
    let mut gw2 = want_gw.then(|| Array2::<f64>::zeros((cout, cin * kh * kw)));

    for bi in 0..bsz {
        let gb = gout.index_axis(Axis(0), bi);
        let gb2 = gb.into_shape((cout, oh * ow)).unwrap();
        if let Some(acc) = gw2.as_mut() {
            let xb = x.index_axis(Axis(0), bi);
            let col = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                xb.into_shape((cin, h * wdt)).unwrap().to_owned()
            } else {
                im2col(&xb, kh, kw, stride, pad, oh, ow)
            };
            *acc += &gb2.dot(&col.t());
        }
        if let Some(gx) = gx.as_mut() {
            let gcol = w2.t().dot(&gb2); // [cin*kh*kw, oh*ow]
            let mut gxb = gx.index_axis_mut(Axis(0), bi);
            // col2im scatter-add, fixed traversal order
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (ci * kh + ki) * kw + kj;
                        for oy in 0..oh {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                gxb[[ci, iy as usize, ix as usize]] += gcol[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        gx,
        gw2.map(|m| m.into_shape((cout, cin, kh, kw)).unwrap().to_owned()),
    )
}

/// Returns `(normalized, mean, var)`; stats per channel over `(B, H, W)`.
fn norm_batch_forward(
    x: &Array4<f64>,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = (bsz * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..bsz {
            s += x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum();
        }
        mean[ci] = s / m;
        let mut v = 0.0;
        for bi in 0..bsz {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for &e in plane.iter() {
                let d = e - mean[ci];
                v += d * d;
            }
        }
        var[ci] = v / m;
    }
    let mut out = x.clone();
    for bi in 0..bsz {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let (mu, g, b) = (mean[ci], gamma[ci], beta[ci]);
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .mapv_inplace(|e| (e - mu) * inv * g + b);
        }
    }
    (out, mean, var)
}

fn norm_batch_backward(
    x: &Array4<f64>,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    gout: &Array4<f64>,
) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = (bsz * h * w) as f64;
    let (_, mean, var) = norm_batch_forward(x, gamma, beta, eps);
    let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + eps).sqrt();
        let mu = mean[ci];
        // accumulate the three reductions in one fixed-order pass
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0; // sum of g * xhat
        for bi in 0..bsz {
            for hi in 0..h {
                for wi in 0..w {
                    let go = gout[[bi, ci, hi, wi]];
                    let xhat = (x[[bi, ci, hi, wi]] - mu) * inv;
                    sum_g += go;
                    sum_gx += go * xhat;
                }
            }
        }
        ggamma[ci] = sum_gx;
        gbeta[ci] = sum_g;
        let gscale = gamma[ci] * inv;
        for bi in 0..bsz {
            for hi in 0..h {
                for wi in 0..w {
                    let go = gout[[bi, ci, hi, wi]];
                    let xhat = (x[[bi, ci, hi, wi]] - mu) * inv;
                    gx[[bi, ci, hi, wi]] =
                        gscale * (go - sum_g / m - xhat * (sum_gx / m));
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Disjoint cell boundaries for adaptive pooling: cell `i` covers
/// `[i*n/out, (i+1)*n/out)`.
fn bin_bounds(n: usize, out: usize, i: usize) -> (usize, usize) {
    (i * n / out, (i + 1) * n / out)
}

fn avg_pool_bins_forward(x: &Array4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(oh <= h && ow <= w, "pool bins exceed input size");
    let mut out = Array4::<f64>::zeros((bsz, c, oh, ow));
    for bi in 0..bsz {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1) = bin_bounds(h, oh, oy);
                for ox in 0..ow {
                    let (x0, x1) = bin_bounds(w, ow, ox);
                    let mut s = 0.0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            s += x[[bi, ci, iy, ix]];
                        }
                    }
                    out[[bi, ci, oy, ox]] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    out
}

fn avg_pool_bins_backward(xshape: &[usize], oh: usize, ow: usize, gout: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
    for bi in 0..bsz {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1) = bin_bounds(h, oh, oy);
                for ox in 0..ow {
                    let (x0, x1) = bin_bounds(w, ow, ox);
                    let d = gout[[bi, ci, oy, ox]] / ((y1 - y0) * (x1 - x0)) as f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            gx[[bi, ci, iy, ix]] += d;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Per-axis interpolation plan: `(lo index, hi index, hi weight)`.
fn bilinear_axis_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            (i0, i1, t.clamp(0.0, 1.0))
        })
        .collect()
}

fn upsample_bilinear_forward(x: &Array4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ys = bilinear_axis_plan(h, oh);
    let xs = bilinear_axis_plan(w, ow);
    let mut out = Array4::<f64>::zeros((bsz, c, oh, ow));
    for bi in 0..bsz {
        for ci in 0..c {
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let v00 = x[[bi, ci, y0, x0]];
                    let v01 = x[[bi, ci, y0, x1]];
                    let v10 = x[[bi, ci, y1, x0]];
                    let v11 = x[[bi, ci, y1, x1]];
                    out[[bi, ci, oy, ox]] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                        + ty * ((1.0 - tx) * v10 + tx * v11);
                }
            }
        }
    }
    out
}

fn upsample_bilinear_backward(
    xshape: &[usize],
    oh: usize,
    ow: usize,
    gout: &Array4<f64>,
) -> Array4<f64> {
    let (bsz, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let ys = bilinear_axis_plan(h, oh);
    let xs = bilinear_axis_plan(w, ow);
    let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
    for bi in 0..bsz {
        for ci in 0..c {
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let go = gout[[bi, ci, oy, ox]];
                    gx[[bi, ci, y0, x0]] += go * (1.0 - ty) * (1.0 - tx);
                    gx[[bi, ci, y0, x1]] += go * (1.0 - ty) * tx;
                    gx[[bi, ci, y1, x0]] += go * ty * (1.0 - tx);
                    gx[[bi, ci, y1, x1]] += go * ty * tx;
                }
            }
        }
    }
    gx
}
