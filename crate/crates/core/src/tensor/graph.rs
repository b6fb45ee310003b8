//! Tape-recorded reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Leaves are
//! either tracked (parameters, or inputs whose gradient is wanted) or
//! constants. An op is recorded as tracked when any of its inputs is, and
//! [`Graph::backward`] visits tracked nodes once each in reverse recording
//! order. A graph can be differentiated once; build a new one per step.

use std::sync::Arc;

use super::kernels::{axis_split, batch_to_channel_major, channel_major_to_batch, Geometry, PadMode};
use super::{Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, padding and optional weight mask of a 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvSpec<T> {
    pub stride: usize,
    pub padding: usize,
    pub mode: PadMode,
    /// Multiplied into the weight before use; masked taps receive no gradient.
    pub mask: Option<Arc<Tensor<T>>>,
}

impl<T> ConvSpec<T> {
    pub fn new(stride: usize, padding: usize, mode: PadMode) -> Self {
        Self { stride, padding, mode, mask: None }
    }

    pub fn with_mask(mut self, mask: Arc<Tensor<T>>) -> Self {
        self.mask = Some(mask);
        self
    }
}

impl<T: Real> ConvSpec<T> {
    pub fn cast<U: Real>(&self) -> ConvSpec<U> {
        ConvSpec {
            stride: self.stride,
            padding: self.padding,
            mode: self.mode,
            mask: self.mask.as_ref().map(|m| Arc::new(m.cast())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    BiasAdd(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: Geometry, mask: Option<Arc<Tensor<T>>> },
    ConvTranspose2d { x: Var, w: Var, geom: Geometry },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    PadReflect { x: Var, pad: usize },
    Gather { x: Var, axis: usize, index: Vec<usize> },
    PickLogSoftmax { x: Var, axis: usize, index: Vec<usize> },
    Clamp { x: Var, lo: T, hi: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is accumulated by [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        // Untracked results never need their recipe.
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::of(c);
        let v = self.map(a, |p| p * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::of(c);
        let v = self.map(a, |p| p + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// Adds `b[j]` to every element whose axis-1 index is `j`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(shape_err("bias_add", format!("{:?} + bias {:?}", shape, self.shape(b))));
        }
        let (outer, len, inner) = axis_split(&shape, 1);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for (j, &bj) in bias.iter().enumerate().take(len) {
                for v in &mut out[(o * len + j) * inner..][..inner] {
                    *v += bj;
                }
            }
        }
        self.push("bias_add", Tensor::from_parts(shape, out), Op::BiasAdd(x, b), &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]` to `[N, Cout, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec<T>) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if let Some(m) = &spec.mask {
            if m.shape() != sw.as_slice() {
                return Err(shape_err("conv2d", format!("mask {:?} vs weight {sw:?}", m.shape())));
            }
        }
        let (n, cout, k) = (sx[0], sw[0], sw[2]);
        let oh = Geometry::output_extent(sx[2], k, spec.stride, spec.padding);
        let ow = Geometry::output_extent(sx[3], k, spec.stride, spec.padding);
        let (Some(out_h), Some(out_w)) = (oh, ow) else {
            return Err(shape_err("conv2d", format!("kernel {k} does not fit {sx:?} with padding {}", spec.padding)));
        };
        let geom = Geometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: k,
            stride: spec.stride,
            pad: spec.padding,
            out_h,
            out_w,
            mode: spec.mode,
        };
        let weight = effective_weight(self.value(w), spec.mask.as_deref());
        let (pos, rows) = (geom.positions(), geom.rows());
        let out = if per_sample_gemm(&geom) {
            let cols = (!is_pointwise(&geom)).then(|| geom.im2col(self.value(x).data(), n));
            let mut out = vec![T::zero(); n * cout * pos];
            for b in 0..n {
                let (src, ld) = sample_cols(cols.as_deref(), self.value(x).data(), &geom, n, b);
                T::gemm_ld(
                    false,
                    false,
                    cout,
                    rows,
                    pos,
                    T::one(),
                    &weight,
                    rows,
                    src,
                    ld,
                    T::zero(),
                    &mut out[b * cout * pos..],
                    pos,
                );
            }
            out
        } else {
            let cols = geom.im2col(self.value(x).data(), n);
            let mut out = vec![T::zero(); cout * n * pos];
            T::gemm(false, false, cout, rows, n * pos, T::one(), &weight, &cols, T::zero(), &mut out);
            channel_major_to_batch(&out, cout, n, pos)
        };
        let value = Tensor::from_parts(vec![n, cout, out_h, out_w], out);
        let op = Op::Conv2d { x, w, geom, mask: spec.mask.clone() };
        self.push("conv2d", value, op, &[x, w])
    }

    /// `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`; the adjoint of a zero-padded
    /// [`conv2d`](Self::conv2d) with the same stride and padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: ConvTransposeSpec) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv_transpose2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let (n, cin, cout, k) = (sx[0], sx[1], sw[1], sw[2]);
        let grow = |s: usize| (s - 1) * spec.stride + k + spec.output_padding;
        let (full_h, full_w) = (grow(sx[2]), grow(sx[3]));
        if spec.stride == 0
            || full_h <= 2 * spec.padding
            || full_w <= 2 * spec.padding
            || spec.output_padding >= spec.stride
        {
            return Err(shape_err("conv_transpose2d", format!("invalid geometry {spec:?} for {sx:?}")));
        }
        let geom = Geometry {
            channels: cout,
            height: full_h - 2 * spec.padding,
            width: full_w - 2 * spec.padding,
            kernel: k,
            stride: spec.stride,
            pad: spec.padding,
            out_h: sx[2],
            out_w: sx[3],
            mode: PadMode::Zero,
        };
        let xs = batch_to_channel_major(self.value(x).data(), cin, n, geom.positions());
        let np = n * geom.positions();
        let mut cols = vec![T::zero(); geom.rows() * np];
        T::gemm(true, false, geom.rows(), cin, np, T::one(), self.value(w).data(), &xs, T::zero(), &mut cols);
        let mut out = vec![T::zero(); n * geom.image_len()];
        geom.col2im(&cols, n, &mut out);
        let value = Tensor::from_parts(vec![n, cout, geom.height, geom.width], out);
        self.push("conv_transpose2d", value, Op::ConvTranspose2d { x, w, geom }, &[x, w])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |p| p.max(T::zero()));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |p| p.tanh());
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |p| {
            if p >= T::zero() {
                T::one() / (T::one() + (-p).exp())
            } else {
                let e = p.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.map(a, |p| p.exp());
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.value(a).data().iter().any(|&p| p <= T::zero()) {
            return Err(TensorError::NonPositiveLog);
        }
        let v = self.map(a, |p| p.ln());
        self.push("log", v, Op::Log(a), &[a])
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), TensorError> {
        if axis >= self.shape(a).len() {
            return Err(shape_err(op, format!("axis {axis} out of range for {:?}", self.shape(a))));
        }
        Ok(())
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("log_softmax", a, axis)?;
        let x = self.value(a);
        let v = Tensor::from_parts(x.shape().to_vec(), log_softmax_along(x.data(), x.shape(), axis));
        self.push("log_softmax", v, Op::LogSoftmax { x: a, axis }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", a, axis)?;
        let x = self.value(a);
        let data = log_softmax_along(x.data(), x.shape(), axis).into_iter().map(|p| p.exp()).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("softmax", v, Op::Softmax { x: a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let Some((&inner, rest)) = shape.split_last() else {
            return Err(shape_err("sum_last", "scalar input"));
        };
        let data = self.value(a).data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
        self.push("sum_last", Tensor::from_parts(rest.to_vec(), data), Op::SumLast(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let agree = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                out.extend_from_slice(&self.value(*p).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Axis-1 concatenation (channels of NCHW, features of `[N, D]`).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.concat(parts, 1)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_axis("slice", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        self.push("slice", Tensor::from_parts(s, out), Op::Slice { x: a, axis, start }, &[a])
    }

    /// Pads the two trailing axes by `pad` on every side, edge-including mirror.
    pub fn pad_reflect(&mut self, a: Var, pad: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("pad_reflect", format!("needs rank >= 2, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let planes = self.value(a).len() / (h * w);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(planes * ph * pw);
        for p in 0..planes {
            let plane = &src[p * h * w..][..h * w];
            for y in 0..ph {
                let sy = PadMode::Reflect.source(y as isize - pad as isize, h).unwrap_or(0);
                for x in 0..pw {
                    let sx = PadMode::Reflect.source(x as isize - pad as isize, w).unwrap_or(0);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        let mut s = shape;
        let r = s.len();
        s[r - 2] = ph;
        s[r - 1] = pw;
        self.push("pad_reflect", Tensor::from_parts(s, out), Op::PadReflect { x: a, pad }, &[a])
    }

    /// Picks one entry along `axis` per remaining position; `index` is laid out
    /// in the row-major order of the output shape (the input shape without `axis`).
    pub fn gather(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var, TensorError> {
        self.check_axis("gather", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        if index.len() != outer * inner {
            return Err(shape_err("gather", format!("{} indices for {outer}x{inner} positions", index.len())));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= len) {
            return Err(shape_err("gather", format!("index {bad} out of range {len}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len());
        for o in 0..outer {
            for i in 0..inner {
                out.push(src[(o * len + index[o * inner + i]) * inner + i]);
            }
        }
        let mut s = shape;
        s.remove(axis);
        let op = Op::Gather { x: a, axis, index: index.to_vec() };
        self.push("gather", Tensor::from_parts(s, out), op, &[a])
    }

    /// `gather(log_softmax(a, axis), axis, index)` without materializing the
    /// normalized array.
    pub fn pick_log_softmax(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var, TensorError> {
        self.check_axis("pick_log_softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        if index.len() != outer * inner {
            return Err(shape_err(
                "pick_log_softmax",
                format!("{} indices for {outer}x{inner} positions", index.len()),
            ));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= len) {
            return Err(shape_err("pick_log_softmax", format!("index {bad} out of range {len}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len());
        let (mut max, mut tot) = (vec![T::zero(); inner], vec![T::zero(); inner]);
        for o in 0..outer {
            let block = &src[o * len * inner..][..len * inner];
            log_normalizers(block, len, inner, &mut max, &mut tot);
            for i in 0..inner {
                out.push(block[index[o * inner + i] * inner + i] - max[i] - tot[i]);
            }
        }
        let mut s = shape;
        s.remove(axis);
        let op = Op::PickLogSoftmax { x: a, axis, index: index.to_vec() };
        self.push("pick_log_softmax", Tensor::from_parts(s, out), op, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let v = self.map(a, |p| p.max(lo).min(hi));
        self.push("clamp", v, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        let seed_shape = ls.shape().to_vec();
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(seed_shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::from_parts(self.shape(v).to_vec(), data)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, self.like(*b, gd.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, self.like(*a, gd.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, self.like(*b, gd.iter().zip(av).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, self.like(*a, gd.iter().map(|&x| x * *c).collect())),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.is_tracked(*b) {
                    let (outer, len, inner) = axis_split(g.shape(), 1);
                    let mut gb = vec![T::zero(); len];
                    for o in 0..outer {
                        for (j, acc) in gb.iter_mut().enumerate() {
                            *acc += gd[(o * len + j) * inner..][..inner].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.is_tracked(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(false, true, m, n, k, T::one(), gd, self.value(*b).data(), T::zero(), &mut ga);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.is_tracked(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(true, false, k, m, n, T::one(), self.value(*a).data(), gd, T::zero(), &mut gb);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Conv2d { x, w, geom, mask } if per_sample_gemm(geom) => {
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let (pos, rows) = (geom.positions(), geom.rows());
                let xd = self.value(*x).data();
                let cols = (!is_pointwise(geom)).then(|| geom.im2col(xd, n));
                if self.is_tracked(*w) {
                    let mut gw = vec![T::zero(); cout * rows];
                    for b in 0..n {
                        let (src, ld) = sample_cols(cols.as_deref(), xd, geom, n, b);
                        let beta = if b == 0 { T::zero() } else { T::one() };
                        T::gemm_ld(
                            false,
                            true,
                            cout,
                            pos,
                            rows,
                            T::one(),
                            &gd[b * cout * pos..],
                            pos,
                            src,
                            ld,
                            beta,
                            &mut gw,
                            rows,
                        );
                    }
                    if let Some(m) = mask {
                        for (a, &b) in gw.iter_mut().zip(m.data()) {
                            *a *= b;
                        }
                    }
                    self.accumulate(grads, *w, self.like(*w, gw));
                }
                if self.is_tracked(*x) {
                    let weight = effective_weight(self.value(*w), mask.as_deref());
                    let mut gx = vec![T::zero(); xd.len()];
                    if is_pointwise(geom) {
                        for b in 0..n {
                            let dst = &mut gx[b * rows * pos..];
                            T::gemm_ld(
                                true,
                                false,
                                rows,
                                cout,
                                pos,
                                T::one(),
                                &weight,
                                rows,
                                &gd[b * cout * pos..],
                                pos,
                                T::zero(),
                                dst,
                                pos,
                            );
                        }
                    } else {
                        let np = n * pos;
                        let mut gcols = vec![T::zero(); rows * np];
                        for b in 0..n {
                            let dst = &mut gcols[b * pos..];
                            T::gemm_ld(
                                true,
                                false,
                                rows,
                                cout,
                                pos,
                                T::one(),
                                &weight,
                                rows,
                                &gd[b * cout * pos..],
                                pos,
                                T::zero(),
                                dst,
                                np,
                            );
                        }
                        geom.col2im(&gcols, n, &mut gx);
                    }
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
            }
            Op::Conv2d { x, w, geom, mask } => {
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let np = n * geom.positions();
                let g_cm = batch_to_channel_major(gd, cout, n, geom.positions());
                if self.is_tracked(*w) {
                    let cols = geom.im2col(self.value(*x).data(), n);
                    let mut gw = vec![T::zero(); cout * geom.rows()];
                    T::gemm(false, true, cout, np, geom.rows(), T::one(), &g_cm, &cols, T::zero(), &mut gw);
                    if let Some(m) = mask {
                        for (a, &b) in gw.iter_mut().zip(m.data()) {
                            *a *= b;
                        }
                    }
                    self.accumulate(grads, *w, self.like(*w, gw));
                }
                if self.is_tracked(*x) {
                    let weight = effective_weight(self.value(*w), mask.as_deref());
                    let mut gcols = vec![T::zero(); geom.rows() * np];
                    T::gemm(true, false, geom.rows(), cout, np, T::one(), &weight, &g_cm, T::zero(), &mut gcols);
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    geom.col2im(&gcols, n, &mut gx);
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let n = self.shape(*x)[0];
                let cin = self.shape(*x)[1];
                let np = n * geom.positions();
                let gcols = geom.im2col(gd, n);
                if self.is_tracked(*w) {
                    let xs = batch_to_channel_major(self.value(*x).data(), cin, n, geom.positions());
                    let mut gw = vec![T::zero(); cin * geom.rows()];
                    T::gemm(false, true, cin, np, geom.rows(), T::one(), &xs, &gcols, T::zero(), &mut gw);
                    self.accumulate(grads, *w, self.like(*w, gw));
                }
                if self.is_tracked(*x) {
                    let mut gx = vec![T::zero(); cin * np];
                    T::gemm(
                        false,
                        false,
                        cin,
                        geom.rows(),
                        np,
                        T::one(),
                        self.value(*w).data(),
                        &gcols,
                        T::zero(),
                        &mut gx,
                    );
                    let gx = channel_major_to_batch(&gx, cin, n, geom.positions());
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
            }
            Op::Relu(a) => {
                let d = gd.iter().zip(out.data()).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() });
                self.accumulate(grads, *a, self.like(*a, d.collect()));
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(&x, &y)| x * (T::one() - y * y));
                self.accumulate(grads, *a, self.like(*a, d.collect()));
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(&x, &y)| x * y * (T::one() - y));
                self.accumulate(grads, *a, self.like(*a, d.collect()));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(&x, &y)| x * y);
                self.accumulate(grads, *a, self.like(*a, d.collect()));
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x / y);
                self.accumulate(grads, *a, self.like(*a, d.collect()));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = gd.to_vec();
                for o in 0..outer {
                    let base = o * len * inner;
                    let mut tot = vec![T::zero(); inner];
                    for j in 0..len {
                        for (t, &gv) in tot.iter_mut().zip(&gd[base + j * inner..][..inner]) {
                            *t += gv;
                        }
                    }
                    for j in 0..len {
                        let off = base + j * inner;
                        for i in 0..inner {
                            d[off + i] -= y[off + i].exp() * tot[i];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    let base = o * len * inner;
                    let mut dot = vec![T::zero(); inner];
                    for j in 0..len {
                        let off = base + j * inner;
                        for i in 0..inner {
                            dot[i] += gd[off + i] * y[off + i];
                        }
                    }
                    for j in 0..len {
                        let off = base + j * inner;
                        for i in 0..inner {
                            d[off + i] = y[off + i] * (gd[off + i] - dot[i]);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, self.like(*a, vec![s; self.value(*a).len()]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let s = gd[0] / T::of(n as f64);
                self.accumulate(grads, *a, self.like(*a, vec![s; n]));
            }
            Op::SumLast(a) => {
                let inner = *self.shape(*a).last().unwrap_or(&1);
                let d = gd.iter().flat_map(|&x| std::iter::repeat_n(x, inner)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.is_tracked(*p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                        }
                        self.accumulate(grads, *p, self.like(*p, d));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    d[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&gd[o * len * inner..][..len * inner]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::PadReflect { x, pad } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let planes = self.value(*x).len() / (h * w);
                let mut d = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..ph {
                        let sy = PadMode::Reflect.source(y as isize - *pad as isize, h).unwrap_or(0);
                        for xx in 0..pw {
                            let sx = PadMode::Reflect.source(xx as isize - *pad as isize, w).unwrap_or(0);
                            d[(p * h + sy) * w + sx] += gd[(p * ph + y) * pw + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Gather { x, axis, index } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let mut d = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    for i in 0..inner {
                        d[(o * len + index[o * inner + i]) * inner + i] += gd[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::PickLogSoftmax { x, axis, index } => {
                // d/dx_j = g * (1[j = t] - softmax_j)
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let src = self.value(*x).data();
                let mut d = vec![T::zero(); src.len()];
                let (mut max, mut tot) = (vec![T::zero(); inner], vec![T::zero(); inner]);
                for o in 0..outer {
                    let block = &src[o * len * inner..][..len * inner];
                    log_normalizers(block, len, inner, &mut max, &mut tot);
                    let g = &gd[o * inner..][..inner];
                    let dst = &mut d[o * len * inner..][..len * inner];
                    for j in 0..len {
                        for i in 0..inner {
                            dst[j * inner + i] = -g[i] * (block[j * inner + i] - max[i] - tot[i]).exp();
                        }
                    }
                    for i in 0..inner {
                        dst[index[o * inner + i] * inner + i] += g[i];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { T::zero() });
                self.accumulate(grads, *x, self.like(*x, d.collect()));
            }
        }
    }
}

fn effective_weight<T: Real>(w: &Tensor<T>, mask: Option<&Tensor<T>>) -> Vec<T> {
    match mask {
        Some(m) => w.data().iter().zip(m.data()).map(|(&a, &b)| a * b).collect(),
        None => w.data().to_vec(),
    }
}

/// Numerically stable log-softmax of `data` along `axis`.
/// Per-position max and log-sum-exp (after subtracting the max) of a
/// `[len, inner]` block along its first axis.
fn log_normalizers<T: Real>(block: &[T], len: usize, inner: usize, max: &mut [T], tot: &mut [T]) {
    max.copy_from_slice(&block[..inner]);
    for j in 1..len {
        for (m, &v) in max.iter_mut().zip(&block[j * inner..][..inner]) {
            if v > *m {
                *m = v;
            }
        }
    }
    tot.iter_mut().for_each(|t| *t = T::zero());
    for j in 0..len {
        for ((t, &v), &m) in tot.iter_mut().zip(&block[j * inner..][..inner]).zip(max.iter()) {
            *t += (v - m).exp();
        }
    }
    tot.iter_mut().for_each(|t| *t = t.ln());
}

/// Large output grids run one GEMM per sample straight into NCHW layout;
/// small ones batch all samples into one GEMM and reorder.
fn per_sample_gemm(geom: &Geometry) -> bool {
    geom.positions() >= 64
}

/// 1x1, stride 1, unpadded: the image itself is the column matrix.
fn is_pointwise(geom: &Geometry) -> bool {
    geom.kernel == 1 && geom.stride == 1 && geom.pad == 0
}

/// Column block of sample `b` and its row stride.
fn sample_cols<'a, T>(cols: Option<&'a [T]>, x: &'a [T], geom: &Geometry, n: usize, b: usize) -> (&'a [T], usize) {
    let pos = geom.positions();
    match cols {
        Some(c) => (&c[b * pos..], n * pos),
        None => (&x[b * geom.rows() * pos..], pos),
    }
}

pub fn log_softmax_along<T: Real>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    let mut max = vec![T::zero(); inner];
    let mut tot = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * len * inner;
        max.copy_from_slice(&data[base..base + inner]);
        for j in 1..len {
            for (m, &v) in max.iter_mut().zip(&data[base + j * inner..][..inner]) {
                if v > *m {
                    *m = v;
                }
            }
        }
        tot.iter_mut().for_each(|t| *t = T::zero());
        for j in 0..len {
            let off = base + j * inner;
            for i in 0..inner {
                let s = data[off + i] - max[i];
                out[off + i] = s;
                tot[i] += s.exp();
            }
        }
        for t in tot.iter_mut() {
            *t = t.ln();
        }
        for j in 0..len {
            let off = base + j * inner;
            for i in 0..inner {
                out[off + i] -= tot[i];
            }
        }
    }
    out
}
