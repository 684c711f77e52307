//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. Node ids are assigned in execution order, so walking
//! them backwards is a valid topological order for [`Tape::backward`].
//! Parameters enter the tape as leaves; their gradients are accumulated into
//! the shared [`Parameter`] storage, so a parameter used by several stages
//! receives the sum of all contributions.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, AxisTaps, ConvGeom};
use crate::param::Parameter;
use crate::tensor::{Float, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Crop window `[y0, y1) x [x0, x1)` in cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CellRect {
    pub fn full(h: usize, w: usize) -> Self {
        CellRect { y0: 0, y1: h, x0: 0, x1: w }
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
}

enum Op<T: Float> {
    Leaf,
    Param(Parameter<T>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    KernelFlip {
        w: Var,
    },
    Gap {
        x: Var,
    },
    Fc {
        x: Var,
        w: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    CropResize {
        x: Var,
        rects: Vec<CellRect>,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T: Float> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::KernelFlip { .. } => "kernel_flip",
            Op::Gap { .. } => "gap",
            Op::Fc { .. } => "fc",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "broadcast_add",
            Op::Mul { .. } => "ewise_mul",
            Op::CropResize { .. } => "crop_resize",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }
}

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, Var>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grads: RefCell::new(Vec::new()),
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.input(t, false)
            .expect("constant inputs must be finite")
    }

    /// Input leaf; with `requires_grad` its gradient is readable via [`grad`](Self::grad).
    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.params.borrow().get(&p.key()) {
            return v;
        }
        let value = p.value().clone();
        let v = self
            .push(value, Op::Param(p.clone()), true)
            .expect("parameters must be finite");
        self.params.borrow_mut().insert(p.key(), v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<Ref<'_, Tensor<T>>> {
        let grads = self.grads.borrow();
        if grads.get(v.0).is_some_and(|g| g.is_some()) {
            Some(Ref::map(grads, |g| g[v.0].as_ref().unwrap()))
        } else {
            None
        }
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution. `w` is `(C_out, C_in, k, k)`, `b` is `(1, C_out, 1, 1)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [n, c, h, wd] = xs.0;
        let [c_out, c_in, k, k2] = ws.0;
        if c_in != c || k != k2 || stride == 0 {
            return Err(Error::Shape { op: "conv2d", lhs: xs, rhs: ws });
        }
        if self.shape(b).numel() != c_out {
            return Err(Error::Shape { op: "conv2d bias", lhs: ws, rhs: self.shape(b) });
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_size(h, k, stride, pad),
            kernels::conv_out_size(wd, k, stride, pad),
        ) else {
            return Err(Error::Shape { op: "conv2d", lhs: xs, rhs: ws });
        };
        let geom = ConvGeom { c, h, w: wd, k, stride, pad, oh, ow };
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (rows, plane) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::ZERO; n * c_out * plane];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::ZERO; n * rows * plane]
        };
        for item in 0..n {
            let x_item = &xv.data()[item * xs.item_len()..(item + 1) * xs.item_len()];
            let col: &[T] = if geom.is_pointwise() {
                x_item
            } else {
                let col = &mut cols[item * rows * plane..(item + 1) * rows * plane];
                kernels::im2col(x_item, &geom, col);
                col
            };
            let y = &mut out[item * c_out * plane..(item + 1) * c_out * plane];
            for (o, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(bv.data()[o]);
            }
            T::gemm(c_out, rows, plane, wv.data(), false, col, false, T::ONE, y);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(Shape::new(n, c_out, oh, ow), out)?,
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        )
    }

    /// Transposed 3x3 convolution, stride 1, padding 1, so the output keeps
    /// the input's spatial size. `w` is `(C_in, C_out, 3, 3)`.
    pub fn deconv2d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w);
        if ws.h() != 3 || ws.w() != 3 {
            return Err(Error::Config(format!(
                "deconvolution kernel must be 3x3, got {ws}"
            )));
        }
        if ws.n() != self.shape(x).c() {
            return Err(Error::Shape { op: "deconv2d", lhs: self.shape(x), rhs: ws });
        }
        // Stride-1 transposed convolution == convolution with the kernel
        // spatially flipped and its channel axes swapped.
        let flipped = self.kernel_flip(w)?;
        self.conv2d(x, flipped, b, 1, 1)
    }

    fn kernel_flip(&self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        let [ci, co, k, _] = wv.shape().0;
        let out = Tensor::from_fn(Shape::new(co, ci, k, k), |[o, c, p, q]| {
            wv.at([c, o, k - 1 - p, k - 1 - q])
        });
        self.push(out, Op::KernelFlip { w }, self.rg(w))
    }

    /// Global average pooling to `(N, C, 1, 1)`.
    pub fn gap(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let plane = s.plane();
        let inv = T::ONE / T::from_usize(plane);
        let data = xv
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(
            Tensor::new(Shape::vector(s.n(), s.c()), data)?,
            Op::Gap { x },
            self.rg(x),
        )
    }

    /// Fully connected layer over the flattened item: `w` is `(out, in, 1, 1)`.
    pub fn fc(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, fin) = (xs.n(), xs.item_len());
        let fout = ws.n();
        if ws.item_len() != fin || self.shape(b).numel() != fout {
            return Err(Error::Shape { op: "fc", lhs: xs, rhs: ws });
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        T::gemm(n, fin, fout, xv.data(), false, wv.data(), true, T::ONE, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(Shape::vector(n, fout), out)?,
            Op::Fc { x, w, b },
            rg,
        )
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::ONE / (T::ONE + (-v).exp()));
        self.push(out, Op::Sigmoid { x }, self.rg(x))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(out, Op::Relu { x }, self.rg(x))
    }

    fn broadcast_binary(&self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let out_shape = sa
            .broadcast(sb)
            .ok_or(Error::Shape { op: op_name, lhs: sa, rhs: sb })?;
        if sa == sb {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(out_shape, data);
        }
        let (ia, ib) = (BroadcastIndex::new(sa, out_shape), BroadcastIndex::new(sb, out_shape));
        let mut data = Vec::with_capacity(out_shape.numel());
        for_each_index(out_shape, |idx| {
            data.push(f(av.data()[ia.offset(idx)], bv.data()[ib.offset(idx)]));
        });
        Tensor::new(out_shape, data)
    }

    /// Elementwise sum with size-1 broadcasting on every axis.
    pub fn broadcast_add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "broadcast_add", |x, y| x + y)?;
        self.push(out, Op::Add { a, b }, self.rg(a) || self.rg(b))
    }

    /// Elementwise product with size-1 broadcasting on every axis.
    pub fn ewise_mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "ewise_mul", |x, y| x * y)?;
        self.push(out, Op::Mul { a, b }, self.rg(a) || self.rg(b))
    }

    /// Half-pixel-centre bilinear resize of every plane.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        self.crop_resize(x, &vec![CellRect::full(s.h(), s.w()); s.n()], out_h, out_w)
    }

    /// Per-item crop followed by bilinear resize to `out_h x out_w`.
    pub fn crop_resize(&self, x: Var, rects: &[CellRect], out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if rects.len() != s.n() || out_h == 0 || out_w == 0 {
            return Err(Error::Config(format!(
                "crop_resize: {} rects for batch {}, target {out_h}x{out_w}",
                rects.len(),
                s.n()
            )));
        }
        for r in rects {
            if r.y0 >= r.y1 || r.x0 >= r.x1 || r.y1 > s.h() || r.x1 > s.w() {
                return Err(Error::Config(format!("crop window {r:?} outside {s}")));
            }
        }
        let plane_out = out_h * out_w;
        let mut out = vec![T::ZERO; s.n() * s.c() * plane_out];
        for (n, r) in rects.iter().enumerate() {
            let identity = r.height() == out_h && r.width() == out_w;
            let rows = AxisTaps::<T>::new(r.y0, r.height(), out_h);
            let cols = AxisTaps::<T>::new(r.x0, r.width(), out_w);
            for c in 0..s.c() {
                let base = (n * s.c() + c) * s.plane();
                let src = &xv.data()[base..base + s.plane()];
                let dst = &mut out[(n * s.c() + c) * plane_out..][..plane_out];
                if identity {
                    for (i, row) in dst.chunks_mut(out_w).enumerate() {
                        let start = (r.y0 + i) * s.w() + r.x0;
                        row.copy_from_slice(&src[start..start + out_w]);
                    }
                } else {
                    kernels::resize_plane(src, s.w(), &rows, &cols, dst);
                }
            }
        }
        self.push(
            Tensor::new(Shape::new(s.n(), s.c(), out_h, out_w), out)?,
            Op::CropResize { x, rects: rects.to_vec() },
            self.rg(x),
        )
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum { x }, self.rg(x))
    }

    pub fn scale(&self, x: Var, k: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale { x, k }, self.rg(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_xent(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        let (n, k) = (s.n(), s.item_len());
        if labels.len() != n {
            return Err(Error::Config(format!("{} labels for batch {n}", labels.len())));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::ZERO;
        for (row, &label) in lv.data().chunks(k).zip(labels) {
            if label >= k {
                return Err(Error::Label { label, classes: k });
            }
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        loss = loss / T::from_usize(n);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            self.rg(logits),
        )
    }

    /// Index of the first node holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`. Parameter gradients accumulate
    /// into their shared storage; calling twice without zeroing doubles them.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let ls = nodes[loss.0].value.shape();
        if ls != Shape::SCALAR {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = Accum { grads: &mut grads, nodes: &nodes };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => p.accumulate_grad(&g),
                Op::Conv2d { x, w, b, geom, cols } => {
                    conv_backward(&mut acc, &g, *x, *w, *b, geom, cols);
                }
                Op::KernelFlip { w } => {
                    if acc.wants(*w) {
                        let [ci, co, k, _] = acc.shape(*w).0;
                        let out_shape = node.value.shape();
                        let dw = acc.slot(*w);
                        for c in 0..ci {
                            for o in 0..co {
                                for p in 0..k {
                                    for q in 0..k {
                                        let src = ((o * ci + c) * k + (k - 1 - p)) * k + (k - 1 - q);
                                        dw[((c * co + o) * k + p) * k + q] += g[src];
                                    }
                                }
                            }
                        }
                        debug_assert_eq!(out_shape.numel(), g.len());
                    }
                }
                Op::Gap { x } => {
                    if acc.wants(*x) {
                        let plane = acc.shape(*x).plane();
                        let inv = T::ONE / T::from_usize(plane);
                        let dx = acc.slot(*x);
                        for (chunk, &gv) in dx.chunks_mut(plane).zip(&g) {
                            for v in chunk {
                                *v += gv * inv;
                            }
                        }
                    }
                }
                Op::Fc { x, w, b } => {
                    let xs = acc.shape(*x);
                    let (n, fin) = (xs.n(), xs.item_len());
                    let fout = acc.shape(*w).n();
                    if acc.wants(*w) {
                        let xv = acc.value(*x);
                        T::gemm(fout, n, fin, &g, true, xv.data(), false, T::ONE, acc.slot(*w));
                    }
                    if acc.wants(*b) {
                        let db = acc.slot(*b);
                        for row in g.chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    if acc.wants(*x) {
                        let wv = acc.value(*w);
                        T::gemm(n, fout, fin, &g, false, wv.data(), false, T::ONE, acc.slot(*x));
                    }
                }
                Op::Sigmoid { x } => {
                    if acc.wants(*x) {
                        let y = node.value.clone();
                        let dx = acc.slot(*x);
                        for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(y.data()) {
                            *d += gv * yv * (T::ONE - yv);
                        }
                    }
                }
                Op::Relu { x } => {
                    if acc.wants(*x) {
                        let xv = acc.value(*x);
                        let dx = acc.slot(*x);
                        for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv.data()) {
                            if v > T::ZERO {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let out = node.value.shape();
                    for v in [*a, *b] {
                        if acc.wants(v) {
                            let ix = BroadcastIndex::new(acc.shape(v), out);
                            let dv = acc.slot(v);
                            let mut k = 0;
                            for_each_index(out, |idx| {
                                dv[ix.offset(idx)] += g[k];
                                k += 1;
                            });
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let out = node.value.shape();
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if acc.wants(v) {
                            let ov = acc.value(other);
                            let io = BroadcastIndex::new(ov.shape(), out);
                            let ix = BroadcastIndex::new(acc.shape(v), out);
                            let dv = acc.slot(v);
                            let mut k = 0;
                            for_each_index(out, |idx| {
                                dv[ix.offset(idx)] += g[k] * ov.data()[io.offset(idx)];
                                k += 1;
                            });
                        }
                    }
                }
                Op::CropResize { x, rects } => {
                    if acc.wants(*x) {
                        let s = acc.shape(*x);
                        let os = node.value.shape();
                        let (oh, ow) = (os.h(), os.w());
                        let dx = acc.slot(*x);
                        for (n, r) in rects.iter().enumerate() {
                            let rows = AxisTaps::<T>::new(r.y0, r.height(), oh);
                            let cols = AxisTaps::<T>::new(r.x0, r.width(), ow);
                            for c in 0..s.c() {
                                let go = &g[(n * s.c() + c) * oh * ow..][..oh * ow];
                                let dst = &mut dx[(n * s.c() + c) * s.plane()..][..s.plane()];
                                kernels::resize_plane_backward(go, s.w(), &rows, &cols, dst);
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if acc.wants(*x) {
                        for d in acc.slot(*x) {
                            *d += g[0];
                        }
                    }
                }
                Op::Scale { x, k } => {
                    if acc.wants(*x) {
                        for (d, &gv) in acc.slot(*x).iter_mut().zip(&g) {
                            *d += gv * *k;
                        }
                    }
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    if acc.wants(*logits) {
                        let k = acc.shape(*logits).item_len();
                        let scale = g[0] / T::from_usize(labels.len());
                        let dl = acc.slot(*logits);
                        for (n, &label) in labels.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == label { T::ONE } else { T::ZERO };
                                dl[n * k + j] += (probs[n * k + j] - onehot) * scale;
                            }
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }

        let stored = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.and_then(|g| Tensor::new(n.value.shape(), g).ok()))
            .collect();
        *self.grads.borrow_mut() = stored;
        Ok(())
    }
}

/// Gradient buffers during a backward sweep.
struct Accum<'a, T: Float> {
    grads: &'a mut Vec<Option<Vec<T>>>,
    nodes: &'a [Node<T>],
}

impl<T: Float> Accum<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    fn slot(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.shape().numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
    }
}

fn conv_backward<T: Float>(
    acc: &mut Accum<'_, T>,
    g: &[T],
    x: Var,
    w: Var,
    b: Var,
    geom: &ConvGeom,
    cols: &[T],
) {
    let xs = acc.shape(x);
    let c_out = acc.shape(w).n();
    let (rows, plane) = (geom.col_rows(), geom.col_cols());
    let xv = acc.value(x);
    if acc.wants(b) {
        let db = acc.slot(b);
        for item in g.chunks(c_out * plane) {
            for (o, chunk) in item.chunks(plane).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    if acc.wants(w) {
        let dw = acc.slot(w);
        for item in 0..xs.n() {
            let gy = &g[item * c_out * plane..(item + 1) * c_out * plane];
            let col: &[T] = if geom.is_pointwise() {
                &xv.data()[item * xs.item_len()..(item + 1) * xs.item_len()]
            } else {
                &cols[item * rows * plane..(item + 1) * rows * plane]
            };
            T::gemm(c_out, plane, rows, gy, false, col, true, T::ONE, dw);
        }
    }
    if acc.wants(x) {
        let wv = acc.value(w);
        let mut dcol = vec![T::ZERO; rows * plane];
        let dx = acc.slot(x);
        for item in 0..xs.n() {
            let gy = &g[item * c_out * plane..(item + 1) * c_out * plane];
            let dx_item = &mut dx[item * xs.item_len()..(item + 1) * xs.item_len()];
            if geom.is_pointwise() {
                T::gemm(rows, c_out, plane, wv.data(), true, gy, false, T::ONE, dx_item);
            } else {
                T::gemm(rows, c_out, plane, wv.data(), true, gy, false, T::ZERO, &mut dcol);
                kernels::col2im(&dcol, geom, dx_item);
            }
        }
    }
}

fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let m = row.iter().copied().fold(row[0], T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Maps an index in a broadcast output shape to an offset in an operand.
struct BroadcastIndex {
    strides: [usize; 4],
}

impl BroadcastIndex {
    fn new(operand: Shape, out: Shape) -> Self {
        let s = operand.strides();
        let mut strides = [0; 4];
        for i in 0..4 {
            strides[i] = if operand.0[i] == out.0[i] { s[i] } else { 0 };
        }
        BroadcastIndex { strides }
    }

    #[inline]
    fn offset(&self, idx: [usize; 4]) -> usize {
        idx[0] * self.strides[0] + idx[1] * self.strides[1] + idx[2] * self.strides[2] + idx[3] * self.strides[3]
    }
}

#[inline]
fn for_each_index(shape: Shape, mut f: impl FnMut([usize; 4])) {
    let [n, c, h, w] = shape.0;
    for a in 0..n {
        for b in 0..c {
            for i in 0..h {
                for j in 0..w {
                    f([a, b, i, j]);
                }
            }
        }
    }
}
