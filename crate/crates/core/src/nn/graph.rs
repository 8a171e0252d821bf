//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are copied in
//! as leaves, so the owning [`ParamStore`] is never borrowed across a step.
//! Loss functions live outside the graph: callers compute the loss value and
//! its gradient with respect to one or more graph outputs, then seed
//! [`Graph::backward`] with those gradients.

use super::params::{ParamId, ParamStore};
use super::real::{matmul, Real};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Clamp01(Var),
    Dropout { x: Var, mask: Vec<T> },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    ConcatOuter(Vec<Var>),
    SliceOuter { x: Var, start: usize },
    Pad { x: Var, top: usize, left: usize },
    Crop { x: Var, top: usize, left: usize },
    Reshape(Var),
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
    VectorQuantize { z: Var, codebook: Var, indices: Vec<usize>, beta: T, weight: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by parameter.
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Sum of squares over the listed parameters' gradients.
    pub fn norm_sq(&self, ids: &[ParamId]) -> f64 {
        ids.iter().filter_map(|&id| self.get(id)).flat_map(|t| t.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|t| t.is_finite())
    }
}

/// Result of a vector-quantization node.
#[derive(Clone, Debug)]
pub struct VqOutput {
    pub quantized: Var,
    pub indices: Vec<usize>,
    /// Codebook loss plus `beta` times the commitment loss, unweighted.
    pub loss: f64,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_slots: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_slots: 0 }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Copies the parameter into the graph as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_slots = self.param_slots.max(id.index() + 1);
        let trainable = store.is_trainable(id);
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    /// Copies the parameter in as a constant.
    pub fn param_const(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.input(store.get(id).clone())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, din) = (xv.dim(0), xv.dim(1));
        let dout = wv.dim(0);
        assert_eq!(wv.dim(1), din, "linear: input width {din} vs weight {:?}", wv.shape());
        let mut out = vec![T::zero(); n * dout];
        matmul(xv.data(), false, wv.data(), true, &mut out, n, din, dout, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&[n, dout], out), Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.needs(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    /// Clamp to `[0, 1]`; gradient passes on the closed interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()).min(T::one()));
        let ng = self.needs(a);
        self.push(out, Op::Clamp01(a), ng)
    }

    /// Inverted dropout with keep-mask drawn from `rng`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl rand::Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(a).len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let mut out = self.value(a).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(a);
        self.push(out, Op::Dropout { x: a, mask }, ng)
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, c, hw) = (v.dim(0), v.dim(1), v.dim(2) * v.dim(3));
        let inv = T::lit(1.0 / hw as f64);
        let out: Vec<T> = v.data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let ng = self.needs(a);
        self.push(Tensor::new(&[n, c], out), Op::GlobalAvgPool(a), ng)
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, c, h, w) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (plane, src) in out.chunks_mut(4 * h * w).zip(v.data().chunks(h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    plane[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(&[n, c, 2 * h, 2 * w], out), Op::Upsample2x(a), ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let (n, h, w) = (first[0], first[2], first[3]);
        let c_total: usize = parts.iter().map(|&p| self.value(p).dim(1)).sum();
        let mut out = Vec::with_capacity(n * c_total * h * w);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                assert_eq!((v.dim(0), v.dim(2), v.dim(3)), (n, h, w), "concat_channels shape mismatch");
                let sz = v.dim(1) * h * w;
                out.extend_from_slice(&v.data()[i * sz..(i + 1) * sz]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(&[n, c_total, h, w], out), Op::ConcatChannels(parts.to_vec()), ng)
    }

    /// Stack along the leading (batch) axis.
    pub fn concat_outer(&mut self, parts: &[Var]) -> Var {
        let inner = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &inner[..], "concat_outer shape mismatch");
            rows += v.dim(0);
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&inner);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(&shape, out), Op::ConcatOuter(parts.to_vec()), ng)
    }

    pub fn slice_outer(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_outer(start, len);
        let ng = self.needs(a);
        self.push(out, Op::SliceOuter { x: a, start }, ng)
    }

    /// Zero padding of the two trailing (spatial) axes.
    pub fn pad2d(&mut self, a: Var, top: usize, left: usize, bottom: usize, right: usize) -> Var {
        let v = self.value(a);
        let (n, c, h, w) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for (dst, src) in out.chunks_mut(ho * wo).zip(v.data().chunks(h * w)) {
            for y in 0..h {
                dst[(y + top) * wo + left..(y + top) * wo + left + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::Pad { x: a, top, left }, ng)
    }

    pub fn crop2d(&mut self, a: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let v = self.value(a);
        let (n, c, hi, wi) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        assert!(top + h <= hi && left + w <= wi, "crop outside input");
        let mut out = Vec::with_capacity(n * c * h * w);
        for src in v.data().chunks(hi * wi) {
            for y in top..top + h {
                out.extend_from_slice(&src[y * wi + left..y * wi + left + w]);
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(&[n, c, h, w], out), Op::Crop { x: a, top, left }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Divides `w` by its largest singular value, estimated from the
    /// left singular vector estimate `u` (length = leading dimension of `w`).
    pub fn spectral_norm(&mut self, w: Var, u: &[T]) -> Var {
        let wv = self.value(w);
        let rows = wv.dim(0);
        let cols = wv.len() / rows;
        assert_eq!(u.len(), rows);
        let mut v = vec![T::zero(); cols];
        matmul(wv.data(), true, u, false, &mut v, cols, rows, 1, false);
        normalize(&mut v);
        let mut wvv = vec![T::zero(); rows];
        matmul(wv.data(), false, &v, false, &mut wvv, rows, cols, 1, false);
        let sigma = u.iter().zip(&wvv).map(|(&a, &b)| a * b).sum::<T>().max(T::lit(1e-12));
        let out = wv.map(|x| x / sigma);
        let ng = self.needs(w);
        self.push(out, Op::SpectralNorm { w, u: u.to_vec(), v, sigma }, ng)
    }

    /// Nearest-codebook quantization of `z: (N, D, H, W)` against
    /// `codebook: (K, D)`, with a straight-through gradient to `z`.
    ///
    /// The codebook and commitment terms are folded into the backward pass
    /// with the given `weight`; their unweighted value is returned.
    pub fn vector_quantize(&mut self, z: Var, codebook: Var, beta: f64, weight: f64) -> VqOutput {
        let zv = self.value(z);
        let cb = self.value(codebook);
        let (n, d, h, w) = (zv.dim(0), zv.dim(1), zv.dim(2), zv.dim(3));
        assert_eq!(cb.dim(1), d, "codebook dimension mismatch");
        let hw = h * w;
        let k = cb.dim(0);
        let mut indices = Vec::with_capacity(n * hw);
        let mut out = vec![T::zero(); zv.len()];
        let mut sq = 0.0f64;
        let mut vecbuf = vec![T::zero(); d];
        for i in 0..n {
            let base = i * d * hw;
            for p in 0..hw {
                for c in 0..d {
                    vecbuf[c] = zv.data()[base + c * hw + p];
                }
                let idx = nearest_code(&vecbuf, cb.data(), k, d);
                indices.push(idx);
                for c in 0..d {
                    let e = cb.data()[idx * d + c];
                    out[base + c * hw + p] = e;
                    let diff = (vecbuf[c] - e).as_f64();
                    sq += diff * diff;
                }
            }
        }
        let mse = sq / zv.len() as f64;
        let loss = mse * (1.0 + beta);
        let ng = self.needs(z) || self.needs(codebook);
        let quantized = self.push(
            Tensor::new(&[n, d, h, w], out),
            Op::VectorQuantize { z, codebook, indices: indices.clone(), beta: T::lit(beta), weight: T::lit(weight) },
            ng,
        );
        VqOutput { quantized, indices, loss }
    }

    /// Propagates the seeded output gradients back to every parameter leaf.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut has_vq = false;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed gradient shape mismatch");
            accum(&mut grads, *v, g.clone());
        }
        for node in &self.nodes {
            has_vq |= matches!(node.op, Op::VectorQuantize { .. });
        }
        let mut params: Vec<Option<Tensor<T>>> = (0..self.param_slots).map(|_| None).collect();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let is_vq = has_vq && matches!(node.op, Op::VectorQuantize { .. });
            let g = match grads[idx].take() {
                Some(g) => g,
                None if is_vq => Tensor::zeros(node.value.shape()),
                None => continue,
            };
            self.backward_node(idx, g, &mut grads, &mut params);
        }
        Gradients { params }
    }

    fn backward_node(
        &self,
        idx: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut [Option<Tensor<T>>],
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut params[id.index()] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), &g, *geom, self.needs(*x), b.is_some());
                if let Some(dx) = dx {
                    accum(grads, *x, dx);
                }
                accum(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    accum(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = (xv.dim(0), xv.dim(1));
                let dout = wv.dim(0);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    matmul(g.data(), false, wv.data(), false, &mut dx, n, dout, din, false);
                    accum(grads, *x, Tensor::new(&[n, din], dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    matmul(g.data(), true, xv.data(), false, &mut dw, dout, n, din, false);
                    accum(grads, *w, Tensor::new(&[dout, din], dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accum(grads, *b, Tensor::new(&[dout], db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
                accum(grads, *a, g);
            }
            Op::Scale(a, s) => {
                let s = *s;
                accum(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let mut g = g;
                for (gv, &o) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if o <= T::zero() {
                        *gv = T::zero();
                    }
                }
                accum(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let mut g = g;
                for (gv, &x) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= T::zero() {
                        *gv *= *slope;
                    }
                }
                accum(grads, *a, g);
            }
            Op::Clamp01(a) => {
                let mut g = g;
                for (gv, &x) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x < T::zero() || x > T::one() {
                        *gv = T::zero();
                    }
                }
                accum(grads, *a, g);
            }
            Op::Dropout { x, mask } => {
                let mut g = g;
                for (gv, &m) in g.data_mut().iter_mut().zip(mask) {
                    *gv *= m;
                }
                accum(grads, *x, g);
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.value(*a).shape().to_vec();
                let hw = shape[2] * shape[3];
                let inv = T::lit(1.0 / hw as f64);
                let mut out = Vec::with_capacity(shape.iter().product());
                for &gv in g.data() {
                    out.extend(std::iter::repeat(gv * inv).take(hw));
                }
                accum(grads, *a, Tensor::new(&shape, out));
            }
            Op::Upsample2x(a) => {
                let shape = self.value(*a).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let mut out = vec![T::zero(); shape.iter().product()];
                for (dst, src) in out.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                accum(grads, *a, Tensor::new(&shape, out));
            }
            Op::ConcatChannels(parts) => {
                let n = g.dim(0);
                let hw = g.dim(2) * g.dim(3);
                let c_total = g.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let c = shape[1];
                    if self.needs(p) {
                        let mut out = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let start = (i * c_total + offset) * hw;
                            out.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        accum(grads, p, Tensor::new(&shape, out));
                    }
                    offset += c;
                }
            }
            Op::ConcatOuter(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).dim(0);
                    if self.needs(p) {
                        accum(grads, p, g.slice_outer(start, len));
                    }
                    start += len;
                }
            }
            Op::SliceOuter { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut out = Tensor::zeros(&shape);
                out.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                accum(grads, *x, out);
            }
            Op::Pad { x, top, left } => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let wo = g.dim(3);
                let ho = g.dim(2);
                let mut out = Vec::with_capacity(shape.iter().product());
                for src in g.data().chunks(ho * wo) {
                    for y in 0..h {
                        let row = (y + top) * wo + left;
                        out.extend_from_slice(&src[row..row + w]);
                    }
                }
                accum(grads, *x, Tensor::new(&shape, out));
            }
            Op::Crop { x, top, left } => {
                let shape = self.value(*x).shape().to_vec();
                let (hi, wi) = (shape[2], shape[3]);
                let (h, w) = (g.dim(2), g.dim(3));
                let mut out = Tensor::zeros(&shape);
                for (dst, src) in out.data_mut().chunks_mut(hi * wi).zip(g.data().chunks(h * w)) {
                    for y in 0..h {
                        let row = (y + top) * wi + left;
                        dst[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                    }
                }
                accum(grads, *x, out);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accum(grads, *a, g.reshape(&shape));
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // σ = ‖Wᵀu‖ with u fixed, so dσ/dW = u vᵀ and
                // dL/dW = (G − ⟨G, W/σ⟩ u vᵀ) / σ.
                let rows = u.len();
                let cols = v.len();
                let lambda: T = g.data().iter().zip(node.value.data()).map(|(&a, &b)| a * b).sum();
                let mut out = g;
                for r in 0..rows {
                    for c in 0..cols {
                        let o = &mut out.data_mut()[r * cols + c];
                        *o = (*o - lambda * u[r] * v[c]) / *sigma;
                    }
                }
                accum(grads, *w, out);
            }
            Op::VectorQuantize { z, codebook, indices, beta, weight } => {
                let zv = self.value(*z);
                let cb = self.value(*codebook);
                let (n, d, h, w) = (zv.dim(0), zv.dim(1), zv.dim(2), zv.dim(3));
                let hw = h * w;
                let scale = *weight * T::lit(2.0 / zv.len() as f64);
                if self.needs(*z) {
                    let mut dz = g;
                    for i in 0..n {
                        for p in 0..hw {
                            let idx = indices[i * hw + p];
                            for c in 0..d {
                                let off = i * d * hw + c * hw + p;
                                dz.data_mut()[off] += scale * *beta * (zv.data()[off] - cb.data()[idx * d + c]);
                            }
                        }
                    }
                    accum(grads, *z, dz);
                }
                if self.needs(*codebook) {
                    let mut dc = Tensor::zeros(cb.shape());
                    for i in 0..n {
                        for p in 0..hw {
                            let idx = indices[i * hw + p];
                            for c in 0..d {
                                let off = i * d * hw + c * hw + p;
                                dc.data_mut()[idx * d + c] += scale * (cb.data()[idx * d + c] - zv.data()[off]);
                            }
                        }
                    }
                    accum(grads, *codebook, dc);
                }
            }
        }
    }
}

fn accum<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn normalize<T: Real>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
    for x in v {
        *x = *x / norm;
    }
}

/// Index of the codebook row closest to `z` in Euclidean distance; ties go to
/// the lower index.
pub fn nearest_code<T: Real>(z: &[T], codebook: &[T], k: usize, d: usize) -> usize {
    let mut best = 0;
    let mut best_dist = T::infinity();
    for j in 0..k {
        let row = &codebook[j * d..(j + 1) * d];
        let dist: T = z.iter().zip(row).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = j;
        }
    }
    best
}

fn out_size(input: usize, k: usize, geom: ConvGeom) -> usize {
    assert!(input + 2 * geom.pad >= k, "kernel larger than padded input");
    (input + 2 * geom.pad - k) / geom.stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, geom: ConvGeom, cols: &mut [T]) {
    let ho = out_size(h, kh, geom);
    let wo = out_size(w, kw, geom);
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if geom.stride == 1 {
                        let shift = kj as isize - geom.pad as isize;
                        for (ox, o) in line.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *o = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                        }
                    } else {
                        for (ox, o) in line.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                            *o = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, geom: ConvGeom, x: &mut [T]) {
    let ho = out_size(h, kh, geom);
    let wo = out_size(w, kw, geom);
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, geom: ConvGeom) -> bool {
    kh == 1 && kw == 1 && geom.stride == 1 && geom.pad == 0
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Tensor<T> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, ci, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
    let ho = out_size(h, kh, geom);
    let wo = out_size(wd, kw, geom);
    let k = ci * kh * kw;
    let hw = ho * wo;
    let mut out = vec![T::zero(); n * co * hw];
    let pointwise = is_pointwise(kh, kw, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
    for i in 0..n {
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let oi = &mut out[i * co * hw..(i + 1) * co * hw];
        let src: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, c, h, wd, kh, kw, geom, &mut cols);
            &cols
        };
        matmul(w.data(), false, src, false, oi, co, k, hw, false);
        if let Some(b) = b {
            for (ch, &bv) in b.data().iter().enumerate() {
                for o in &mut oi[ch * hw..(ch + 1) * hw] {
                    *o += bv;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>);

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    geom: ConvGeom,
    want_dx: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, ci, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (ho, wo) = (g.dim(2), g.dim(3));
    let k = ci * kh * kw;
    let hw = ho * wo;
    let pointwise = is_pointwise(kh, kw, geom);
    let mut dw = vec![T::zero(); co * k];
    let mut dx = if want_dx { Some(vec![T::zero(); x.len()]) } else { None };
    let mut db = if want_db { Some(vec![T::zero(); co]) } else { None };
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
    let mut dcols = vec![T::zero(); k * hw];
    for i in 0..n {
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let gi = &g.data()[i * co * hw..(i + 1) * co * hw];
        let src: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, c, h, wd, kh, kw, geom, &mut cols);
            &cols
        };
        matmul(gi, false, src, true, &mut dw, co, hw, k, true);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
            if pointwise {
                matmul(w.data(), true, gi, false, dxi, k, co, hw, true);
            } else {
                matmul(w.data(), true, gi, false, &mut dcols, k, co, hw, false);
                col2im(&dcols, c, h, wd, kh, kw, geom, dxi);
            }
        }
        if let Some(db) = db.as_mut() {
            for (ch, d) in db.iter_mut().enumerate() {
                *d += gi[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    (dx.map(|d| Tensor::new(x.shape(), d)), Tensor::new(w.shape(), dw), db.map(|d| Tensor::new(&[co], d)))
}
