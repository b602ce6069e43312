//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of a scalar node with respect to every node that
//! depends on a gradient-requiring leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Upsample2x(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Reshape(Var),
    Sum(Var),
    SumSq(Var),
    PowerNormalize {
        x: Var,
        norms: Vec<T>,
        target: T,
    },
    ComplexMul {
        x: Var,
        h: Tensor<T>,
    },
    ChannelUnitNorm {
        x: Var,
        norms: Vec<T>,
    },
    NoiseInject {
        x: Var,
        strength: Var,
        noise: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let value = self.value(x).map(|v| s * v + t);
        self.unary(x, value, Op::Affine(x, s))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// 2-D convolution on `[B, C, H, W]` with weight `[Cout, Cin, K, K]` and bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let value = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], out)
            .expect("conv output shape");
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(value, Op::Conv2d { x, w, b, geom }, needs)
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (batch, fan_in) = (self.value(x).batch(), self.value(x).row_len());
        let fan_out = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], fan_in, "linear fan-in mismatch");
        let mut out = vec![T::zero(); batch * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            batch,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let value = Tensor::new(&[batch, fan_out], out).expect("linear output shape");
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * 4 * h * w];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out).expect("upsample shape");
        self.unary(x, value, Op::Upsample2x(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let a = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        self.unary(x, value, Op::LeakyRelu(x, a))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.unary(x, value, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.unary(x, value, Op::Exp(x))
    }

    /// Clamp with a straight-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.value(x).map(|v| v.max(l).min(h));
        self.unary(x, value, Op::Clamp(x, l, h))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape size");
        self.unary(x, value, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v * v);
        self.unary(x, Tensor::scalar(s), Op::SumSq(x))
    }

    /// Squared L2 distance between two equally shaped nodes.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.sum_sq(d)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sq_dist(a, b);
        self.scale(s, 1.0 / n)
    }

    /// Rescales every row of `[B, 2k]` to energy `k · pbar`, i.e. average complex-symbol
    /// power `pbar`.
    pub fn power_normalize(&mut self, x: Var, pbar: f64) -> Var {
        let row = self.value(x).row_len();
        let target = T::from_f64(libm::sqrt(pbar * (row / 2) as f64));
        let mut norms = Vec::with_capacity(self.value(x).batch());
        let mut out = self.value(x).clone();
        for r in out.data_mut().chunks_mut(row) {
            let n = r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            norms.push(n);
            let f = target / n;
            for v in r.iter_mut() {
                *v = *v * f;
            }
        }
        self.unary(x, out, Op::PowerNormalize { x, norms, target })
    }

    /// Element-wise complex product of interleaved `(re, im)` rows with a constant `h`.
    pub fn complex_mul(&mut self, x: Var, h: Tensor<T>) -> Var {
        assert_eq!(self.value(x).numel(), h.numel(), "complex_mul length mismatch");
        let mut out = self.value(x).clone();
        for (z, c) in out.data_mut().chunks_mut(2).zip(h.data().chunks(2)) {
            let (re, im) = (z[0], z[1]);
            z[0] = c[0] * re - c[1] * im;
            z[1] = c[0] * im + c[1] * re;
        }
        self.unary(x, out, Op::ComplexMul { x, h })
    }

    /// Divides each spatial feature vector of `[B, C, H, W]` by its L2 norm across channels.
    pub fn channel_unit_norm(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        let eps = T::from_f64(1e-6);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0] * hw);
        for item in out.data_mut().chunks_mut(c * hw) {
            for p in 0..hw {
                let n = (0..c).fold(T::zero(), |a, ch| a + item[ch * hw + p] * item[ch * hw + p]).sqrt() + eps;
                norms.push(n);
                for ch in 0..c {
                    item[ch * hw + p] = item[ch * hw + p] / n;
                }
            }
        }
        self.unary(x, out, Op::ChannelUnitNorm { x, norms })
    }

    /// `x + strength[c] · noise[b, 0, h, w]` for `x: [B, C, H, W]`, `strength: [C]`,
    /// `noise: [B, 1, H, W]`.
    pub fn noise_inject(&mut self, x: Var, strength: Var, noise: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        assert_eq!(self.value(noise).numel(), s[0] * hw, "noise map shape");
        let mut out = self.value(x).clone();
        let st = self.value(strength).data();
        let nz = self.value(noise).data();
        for (b, item) in out.data_mut().chunks_mut(c * hw).enumerate() {
            for ch in 0..c {
                for p in 0..hw {
                    item[ch * hw + p] = item[ch * hw + p] + st[ch] * nz[b * hw + p];
                }
            }
        }
        let needs = self.needs(x) || self.needs(strength) || self.needs(noise);
        self.push(out, Op::NoiseInject { x, strength, noise }, needs)
    }

    /// Columns `start..start + len` of a `[B, D]` node.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (batch, d) = (self.value(x).batch(), self.value(x).row_len());
        assert!(start + len <= d, "slice out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * len);
        for r in src.chunks(d) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let value = Tensor::new(&[batch, len], out).expect("slice shape");
        self.unary(x, value, Op::SliceCols { x, start })
    }

    /// Concatenates two `[B, *]` nodes along the feature dimension.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let batch = self.value(a).batch();
        let (da, db) = (self.value(a).row_len(), self.value(b).row_len());
        let mut out = Vec::with_capacity(batch * (da + db));
        for (ra, rb) in self.value(a).data().chunks(da).zip(self.value(b).data().chunks(db)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(&[batch, da + db], out).expect("concat shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a, b), needs)
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let c = self.value(logits).row_len();
        assert_eq!(self.value(logits).batch(), labels.len(), "one label per row");
        let mut probs = Vec::with_capacity(labels.len() * c);
        let mut loss = T::zero();
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
            loss = loss + z.ln() + m - row[y];
            probs.extend(row.iter().map(|&v| (v - m).exp() / z));
        }
        let n = T::from_f64(labels.len() as f64);
        let op = Op::CrossEntropy { logits, probs, labels: labels.to_vec() };
        self.unary(logits, Tensor::scalar(loss / n), op)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            // intermediate gradients are dropped as soon as they are consumed
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                let shape = self.shape(v);
                *slot = Some(if g.shape() == shape { g } else { g.reshape(shape).expect("grad shape") });
            }
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, gy.map(|g| g * s));
            }
            Op::Conv2d { x, w, b, geom } => {
                let cg = conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy.data(),
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx).expect("dx"));
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw).expect("dw"));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b), db).expect("db"));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (batch, fan_in) = (xv.batch(), xv.row_len());
                let fan_out = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); batch * fan_in];
                    T::gemm(batch, fan_out, fan_in, T::one(), gy.data(), false, self.value(*w).data(), false, T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("dx"));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    T::gemm(fan_out, batch, fan_in, T::one(), gy.data(), true, xv.data(), false, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw).expect("dw"));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); fan_out];
                    for row in gy.data().chunks(fan_out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(&[fan_out], db).expect("db"));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (dst, src) in dx.chunks_mut(h * w).zip(gy.data().chunks(4 * h * w)) {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut dst[(yy / 2) * w + xx / 2];
                            *d = *d + src[yy * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, dx).expect("dx"));
            }
            Op::LeakyRelu(x, a) => {
                let a = *a;
                let g = gy.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { a * g });
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = gy.zip_map(y, |g, s| g * s * (T::one() - s));
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = gy.zip_map(y, |g, t| g * (T::one() - t * t));
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => {
                let g = gy.zip_map(y, |g, e| g * e);
                self.accumulate(grads, *x, g);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let g = gy.zip_map(self.value(*x), |g, v| if v >= lo && v <= hi { g } else { T::zero() });
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gy.clone().reshape(self.shape(*x)).expect("reshape grad"));
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::SumSq(x) => {
                let g = gy.data()[0] + gy.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| g * v));
            }
            Op::PowerNormalize { x, norms, target } => {
                // y = t·x/‖x‖  ⇒  dx = (t/‖x‖)(gy − y·⟨gy, y⟩/t²)
                let row = y.row_len();
                let t = *target;
                let mut dx = gy.clone();
                for ((d, yr), &n) in dx.data_mut().chunks_mut(row).zip(y.data().chunks(row)).zip(norms) {
                    let dot = d.iter().zip(yr).fold(T::zero(), |a, (&g, &v)| a + g * v);
                    let c = dot / (t * t);
                    for (dv, &yv) in d.iter_mut().zip(yr) {
                        *dv = (t / n) * (*dv - yv * c);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ComplexMul { x, h } => {
                // multiply by conj(h)
                let mut dx = gy.clone();
                for (z, c) in dx.data_mut().chunks_mut(2).zip(h.data().chunks(2)) {
                    let (re, im) = (z[0], z[1]);
                    z[0] = c[0] * re + c[1] * im;
                    z[1] = c[0] * im - c[1] * re;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelUnitNorm { x, norms } => {
                // y = x/n, n = ‖x‖ + ε  ⇒  dx = (gy − y·⟨gy, y⟩·n/‖x‖)/n
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let eps = T::from_f64(1e-6);
                let mut dx = gy.clone();
                for (b, (d, yb)) in dx.data_mut().chunks_mut(c * hw).zip(y.data().chunks(c * hw)).enumerate() {
                    for p in 0..hw {
                        let n = norms[b * hw + p];
                        let r = n / (n - eps);
                        let dot = (0..c).fold(T::zero(), |a, ch| a + d[ch * hw + p] * yb[ch * hw + p]);
                        for ch in 0..c {
                            d[ch * hw + p] = (d[ch * hw + p] - yb[ch * hw + p] * dot * r) / n;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::NoiseInject { x, strength, noise } => {
                self.accumulate(grads, *x, gy.clone());
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                if self.needs(*strength) {
                    let nz = self.value(*noise).data();
                    let mut ds = vec![T::zero(); c];
                    for (b, item) in gy.data().chunks(c * hw).enumerate() {
                        for (ch, d) in ds.iter_mut().enumerate() {
                            for p in 0..hw {
                                *d = *d + item[ch * hw + p] * nz[b * hw + p];
                            }
                        }
                    }
                    self.accumulate(grads, *strength, Tensor::new(self.shape(*strength), ds).expect("ds"));
                }
                if self.needs(*noise) {
                    let st = self.value(*strength).data();
                    let mut dn = vec![T::zero(); s[0] * hw];
                    for (b, item) in gy.data().chunks(c * hw).enumerate() {
                        for (ch, &a) in st.iter().enumerate() {
                            for p in 0..hw {
                                dn[b * hw + p] = dn[b * hw + p] + a * item[ch * hw + p];
                            }
                        }
                    }
                    self.accumulate(grads, *noise, Tensor::new(self.shape(*noise), dn).expect("dn"));
                }
            }
            Op::SliceCols { x, start } => {
                let (batch, d) = (self.value(*x).batch(), self.value(*x).row_len());
                let len = y.row_len();
                let mut dx = vec![T::zero(); batch * d];
                for (dst, src) in dx.chunks_mut(d).zip(gy.data().chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx).expect("slice grad"));
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let c = self.value(*logits).row_len();
                let scale = gy.data()[0] / T::from_f64(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(c).zip(labels) {
                    row[y] = row[y] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits), d).expect("ce grad"));
            }
            Op::ConcatCols(a, b) => {
                let (da, db) = (self.value(*a).row_len(), self.value(*b).row_len());
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for r in gy.data().chunks(da + db) {
                    ga.extend_from_slice(&r[..da]);
                    gb.extend_from_slice(&r[da..]);
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), ga).expect("concat grad"));
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb).expect("concat grad"));
            }
        }
    }
}
