use std::sync::atomic::{AtomicU64, Ordering};

use super::array::{numel, Array};
use super::AutodiffError;
use crate::scalar::{Scalar, Strides};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Affine { x: usize, w: usize, b: usize },
    Conv2d { input: usize, weight: usize, bias: Option<usize>, cols: Option<Vec<T>> },
    Relu(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Embedding { table: usize, indices: Vec<usize> },
    AddChannel(usize, usize),
    AvgPool2(usize),
    Upsample2(usize),
    GlobalAvgPool(usize),
}

struct Node<T> {
    value: Array<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records primitive operations in execution order for one reverse pass.
///
/// Inputs always precede the nodes that consume them, so walking the node
/// list backwards is a valid reverse topological order.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, shape: &[usize], reason: &'static str) -> AutodiffError {
    AutodiffError::InvalidShape { op, shape: shape.to_vec(), reason }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn zero_slot<T: Scalar>(slots: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut Vec<T> {
    slots[j].get_or_insert_with(|| vec![T::zero(); len])
}

/// Row-wise softmax over the last axis, with 64-bit normalisers.
fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            total += e.f64();
            *d = e;
        }
        let inv = T::of(1.0 / total);
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

fn log_softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total: f64 = row.iter().map(|&v| (v - max).f64().exp()).sum();
        let shift = max + T::of(total.ln());
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - shift;
        }
    }
    out
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Visits every (column row, source row, valid x range) triple of the
    /// unfolded input for one image.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let dx = kx as isize - pw;
                    let x0 = (-dx).max(0);
                    let x1 = (w - dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y + ky as isize - ph;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let col_at = r * self.plane() + (y * w + x0) as usize;
                        let src_at = ci * self.plane() + (sy * w + x0 + dx) as usize;
                        f(col_at, src_at, (x1 - x0) as usize);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        self.for_each_segment(|col_at, src_at, n| {
            cols[col_at..col_at + n].copy_from_slice(&image[src_at..src_at + n]);
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        self.for_each_segment(|col_at, src_at, n| {
            for (d, &s) in image[src_at..src_at + n].iter_mut().zip(&cols[col_at..col_at + n]) {
                *d += s;
            }
        });
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::DetachedTape);
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Array<T> {
        &self.nodes[i].value
    }

    /// Records an input array. Gradients are produced only when `requires_grad`.
    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn param(&mut self, value: Array<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    /// Forward value of a recorded variable.
    ///
    /// Panics if `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Array<T> {
        let i = self.idx(v).expect("variable belongs to this tape");
        self.val(i)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: usize,
        b: usize,
        f: impl Fn(T, T) -> T,
    ) -> Result<Array<T>, AutodiffError> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Array::new(va.shape().to_vec(), data);
        }
        if vb.is_scalar() {
            let y = vb.item();
            return Ok(va.map(|x| f(x, y)));
        }
        if va.is_scalar() {
            let x = va.item();
            return Ok(vb.map(|y| f(x, y)));
        }
        Err(mismatch(op, va.shape(), vb.shape()))
    }

    /// Elementwise sum; either side may be a one-element array.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; either side may be a one-element array.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let value = self.val(a).map(|x| x * c);
        Ok(self.push(value, Op::Scale(a, c), &[a]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            self.val(a).data(),
            Strides::row_major(k),
            self.val(b).data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        let value = Array::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` with `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, w, b) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (sx, sw, sb) = (self.val(x).shape(), self.val(w).shape(), self.val(b).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(mismatch("affine", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(mismatch("affine bias", sw, sb));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bias = self.val(b).data();
        let mut out: Vec<T> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            self.val(x).data(),
            Strides::row_major(k),
            self.val(w).data(),
            Strides::row_major(n),
            T::one(),
            &mut out,
            Strides::row_major(n),
        );
        let value = Array::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// Same-size 2-D convolution, stride 1, zero padding of half the kernel.
    ///
    /// `input: [batch, c_in, h, w]`, `weight: [c_out, c_in, kh, kw]` with odd
    /// kernel sides, optional `bias: [c_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        let (input, weight) = (self.idx(input)?, self.idx(weight)?);
        let bias = bias.map(|b| self.idx(b)).transpose()?;
        let (si, sw) = (self.val(input).shape(), self.val(weight).shape());
        if si.len() != 4 {
            return Err(invalid("conv2d", si, "input must be [batch, channels, height, width]"));
        }
        if sw.len() != 4 || sw[1] != si[1] {
            return Err(mismatch("conv2d", si, sw));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(invalid("conv2d", sw, "kernel sides must be odd"));
        }
        if let Some(b) = bias {
            let sb = self.val(b).shape();
            if sb != [sw[0]] {
                return Err(mismatch("conv2d bias", sw, sb));
            }
        }
        let g =
            ConvGeometry { batch: si[0], c_in: si[1], c_out: sw[0], height: si[2], width: si[3], kh: sw[2], kw: sw[3] };
        let (patch, plane) = (g.patch(), g.plane());
        let image_len = g.c_in * plane;
        let mut cols = vec![T::zero(); g.batch * patch * plane];
        let mut out = vec![T::zero(); g.batch * g.c_out * plane];
        let xin = self.val(input).data();
        let wdata = self.val(weight).data();
        for b in 0..g.batch {
            let col_b = &mut cols[b * patch * plane..(b + 1) * patch * plane];
            g.im2col(&xin[b * image_len..(b + 1) * image_len], col_b);
            T::gemm_raw(
                g.c_out,
                patch,
                plane,
                T::one(),
                wdata,
                Strides::row_major(patch),
                col_b,
                Strides::row_major(plane),
                T::zero(),
                &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane],
                Strides::row_major(plane),
            );
        }
        if let Some(bi) = bias {
            let bd = self.val(bi).data();
            for (chunk, c) in out.chunks_mut(plane).zip((0..g.c_out).cycle()) {
                chunk.iter_mut().for_each(|v| *v += bd[c]);
            }
        }
        let keep_cols = self.nodes[weight].requires_grad;
        let value = Array::new(vec![g.batch, g.c_out, g.height, g.width], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let cols = keep_cols.then_some(cols);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, cols }, &inputs))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let value = self.val(a).map(|x| x.max(T::zero()));
        Ok(self.push(value, Op::Relu(a), &[a]))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let value = self.val(a).map(|x| x * sigmoid(x));
        Ok(self.push(value, Op::Silu(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let total = crate::scalar::sum_f64(self.val(a).data());
        Ok(self.push(Array::scalar(T::of(total)), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let v = self.val(a);
        let mean = crate::scalar::sum_f64(v.data()) / v.len() as f64;
        Ok(self.push(Array::scalar(T::of(mean)), Op::Mean(a), &[a]))
    }

    /// Mean squared difference of two same-shape arrays.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mse", va.shape(), vb.shape()));
        }
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| {
                let d = (x - y).f64();
                d * d
            })
            .sum();
        let value = Array::scalar(T::of(total / va.len() as f64));
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    fn last_axis(&self, op: &'static str, a: usize) -> Result<usize, AutodiffError> {
        self.val(a).shape().last().copied().ok_or_else(|| invalid(op, &[], "needs at least one axis"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let width = self.last_axis("softmax", a)?;
        let v = self.val(a);
        let value = Array::new(v.shape().to_vec(), softmax_rows(v.data(), width))?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let width = self.last_axis("log_softmax", a)?;
        let v = self.val(a);
        let value = Array::new(v.shape().to_vec(), log_softmax_rows(v.data(), width))?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// Gathers rows of `table: [rows, dim]`, producing `[indices.len(), dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.idx(table)?;
        let st = self.val(t).shape();
        if st.len() != 2 {
            return Err(invalid("embedding", st, "table must be [rows, dim]"));
        }
        let (rows, dim) = (st[0], st[1]);
        if indices.is_empty() {
            return Err(invalid("embedding", st, "no indices given"));
        }
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(&self.val(t).data()[i * dim..(i + 1) * dim]);
        }
        let value = Array::new(vec![indices.len(), dim], out)?;
        Ok(self.push(value, Op::Embedding { table: t, indices: indices.to_vec() }, &[t]))
    }

    /// Adds a per-image, per-channel offset: `x: [b,c,h,w] + v: [b,c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var, AutodiffError> {
        let (x, v) = (self.idx(x)?, self.idx(v)?);
        let (sx, sv) = (self.val(x).shape(), self.val(v).shape());
        if sx.len() != 4 || sv != [sx[0], sx[1]] {
            return Err(mismatch("add_channel", sx, sv));
        }
        let plane = sx[2] * sx[3];
        let offsets = self.val(v).data();
        let mut out = self.val(x).data().to_vec();
        for (chunk, &o) in out.chunks_mut(plane).zip(offsets) {
            chunk.iter_mut().for_each(|e| *e += o);
        }
        let value = Array::new(sx.to_vec(), out)?;
        Ok(self.push(value, Op::AddChannel(x, v), &[x, v]))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let s = self.val(a).shape().to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(invalid("avg_pool2", &s, "needs [b,c,h,w] with even h and w"));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.val(a).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    dst[y * ow + x] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        let value = Array::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2(a), &[a]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let s = self.val(a).shape().to_vec();
        if s.len() != 4 {
            return Err(invalid("upsample2", &s, "needs [b,c,h,w]"));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.val(a).data();
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Array::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2(a), &[a]))
    }

    /// Spatial mean: `[b,c,h,w] -> [b,c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let a = self.idx(a)?;
        let s = self.val(a).shape().to_vec();
        if s.len() != 4 {
            return Err(invalid("global_avg_pool", &s, "needs [b,c,h,w]"));
        }
        let plane = s[2] * s[3];
        let out = self.val(a).data().chunks(plane).map(|c| T::of(crate::scalar::sum_f64(c) / plane as f64)).collect();
        let value = Array::new(vec![s[0], s[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(a), &[a]))
    }

    /// Reverse pass from a scalar loss. A tape supports exactly one backward.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let root = self.idx(loss)?;
        if self.consumed {
            return Err(AutodiffError::AlreadyConsumed);
        }
        let shape = self.val(root).shape();
        if numel(shape) != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;

        let mut slots: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            slots[root] = Some(vec![T::one()]);
        }
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = slots.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else { continue };
            self.backprop_node(i, g, before);
        }

        let grads = self
            .nodes
            .iter()
            .zip(slots)
            .map(|(node, slot)| match slot {
                Some(data) => Some(Array::new(node.value.shape().to_vec(), data).expect("gradient shape")),
                None if node.requires_grad && matches!(node.op, Op::Leaf) => {
                    Some(Array::zeros(node.value.shape().to_vec()))
                }
                None => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn needs(&self, j: usize) -> bool {
        self.nodes[j].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], slots: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if !self.needs(j) {
                        continue;
                    }
                    let len = self.val(j).len();
                    let dst = zero_slot(slots, j, len);
                    if len == g.len() {
                        dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    } else {
                        dst[0] += T::of(crate::scalar::sum_f64(g));
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (j, other) in [(a, b), (b, a)] {
                    if !self.needs(j) {
                        continue;
                    }
                    let o = self.val(other).data();
                    let at = |k: usize| if o.len() == 1 { o[0] } else { o[k] };
                    let len = self.val(j).len();
                    let dst = zero_slot(slots, j, len);
                    if len == g.len() {
                        for (k, d) in dst.iter_mut().enumerate() {
                            *d += g[k] * at(k);
                        }
                    } else {
                        let total: f64 = g.iter().enumerate().map(|(k, &x)| (x * at(k)).f64()).sum();
                        dst[0] += T::of(total);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.needs(a) {
                    let dst = zero_slot(slots, a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let dst = zero_slot(slots, a, m * k);
                    T::gemm_raw(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        Strides::row_major(n),
                        self.val(b).data(),
                        Strides::transposed(n),
                        T::one(),
                        dst,
                        Strides::row_major(k),
                    );
                }
                if self.needs(b) {
                    let dst = zero_slot(slots, b, k * n);
                    T::gemm_raw(
                        k,
                        m,
                        n,
                        T::one(),
                        self.val(a).data(),
                        Strides::transposed(k),
                        g,
                        Strides::row_major(n),
                        T::one(),
                        dst,
                        Strides::row_major(n),
                    );
                }
            }
            &Op::Affine { x, w, b } => {
                let (sx, sw) = (self.val(x).shape(), self.val(w).shape());
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                if self.needs(x) {
                    let dst = zero_slot(slots, x, m * k);
                    T::gemm_raw(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        Strides::row_major(n),
                        self.val(w).data(),
                        Strides::transposed(n),
                        T::one(),
                        dst,
                        Strides::row_major(k),
                    );
                }
                if self.needs(w) {
                    let dst = zero_slot(slots, w, k * n);
                    T::gemm_raw(
                        k,
                        m,
                        n,
                        T::one(),
                        self.val(x).data(),
                        Strides::transposed(k),
                        g,
                        Strides::row_major(n),
                        T::one(),
                        dst,
                        Strides::row_major(n),
                    );
                }
                if self.needs(b) {
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v.f64());
                    }
                    let dst = zero_slot(slots, b, n);
                    dst.iter_mut().zip(acc).for_each(|(d, s)| *d += T::of(s));
                }
            }
            Op::Conv2d { input, weight, bias, cols } => {
                let (input, weight) = (*input, *weight);
                let (si, sw) = (self.val(input).shape(), self.val(weight).shape());
                let geo = ConvGeometry {
                    batch: si[0],
                    c_in: si[1],
                    c_out: sw[0],
                    height: si[2],
                    width: si[3],
                    kh: sw[2],
                    kw: sw[3],
                };
                let (patch, plane, c_out) = (geo.patch(), geo.plane(), geo.c_out);
                if let Some(b) = *bias {
                    if self.needs(b) {
                        let mut acc = vec![0.0f64; c_out];
                        for (chunk, c) in g.chunks(plane).zip((0..c_out).cycle()) {
                            acc[c] += crate::scalar::sum_f64(chunk);
                        }
                        let dst = zero_slot(slots, b, c_out);
                        dst.iter_mut().zip(acc).for_each(|(d, s)| *d += T::of(s));
                    }
                }
                if self.needs(weight) {
                    let cols = cols.as_ref().expect("columns kept for weight gradient");
                    let dst = zero_slot(slots, weight, c_out * patch);
                    for b in 0..geo.batch {
                        T::gemm_raw(
                            c_out,
                            plane,
                            patch,
                            T::one(),
                            &g[b * c_out * plane..(b + 1) * c_out * plane],
                            Strides::row_major(plane),
                            &cols[b * patch * plane..(b + 1) * patch * plane],
                            Strides::transposed(plane),
                            T::one(),
                            dst,
                            Strides::row_major(patch),
                        );
                    }
                }
                if self.needs(input) {
                    let image_len = geo.c_in * plane;
                    let mut dcols = vec![T::zero(); patch * plane];
                    let wdata = self.val(weight).data();
                    let dst = zero_slot(slots, input, geo.batch * image_len);
                    for b in 0..geo.batch {
                        T::gemm_raw(
                            patch,
                            c_out,
                            plane,
                            T::one(),
                            wdata,
                            Strides::transposed(patch),
                            &g[b * c_out * plane..(b + 1) * c_out * plane],
                            Strides::row_major(plane),
                            T::zero(),
                            &mut dcols,
                            Strides::row_major(plane),
                        );
                        geo.col2im(&dcols, &mut dst[b * image_len..(b + 1) * image_len]);
                    }
                }
            }
            &Op::Relu(a) => {
                let x = self.val(a).data();
                let dst = zero_slot(slots, a, g.len());
                for k in 0..g.len() {
                    if x[k] > T::zero() {
                        dst[k] += g[k];
                    }
                }
            }
            &Op::Silu(a) => {
                let x = self.val(a).data();
                let dst = zero_slot(slots, a, g.len());
                for k in 0..g.len() {
                    let s = sigmoid(x[k]);
                    dst[k] += g[k] * s * (T::one() + x[k] * (T::one() - s));
                }
            }
            &Op::Sum(a) => {
                let len = self.val(a).len();
                let dst = zero_slot(slots, a, len);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean(a) => {
                let len = self.val(a).len();
                let share = g[0] / T::of(len as f64);
                let dst = zero_slot(slots, a, len);
                dst.iter_mut().for_each(|d| *d += share);
            }
            &Op::Mse(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                let coef = g[0] * T::of(2.0 / va.len() as f64);
                for (j, sign) in [(a, T::one()), (b, -T::one())] {
                    if !self.needs(j) {
                        continue;
                    }
                    let dst = zero_slot(slots, j, va.len());
                    for k in 0..va.len() {
                        dst[k] += sign * coef * (va[k] - vb[k]);
                    }
                }
            }
            &Op::Softmax(a) => {
                let width = *node.value.shape().last().expect("softmax axis");
                let y = node.value.data();
                let dst = zero_slot(slots, a, g.len());
                for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(dst.chunks_mut(width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&p, &q)| (p * q).f64()).sum();
                    let dot = T::of(dot);
                    for k in 0..width {
                        dr[k] += yr[k] * (gr[k] - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let width = *node.value.shape().last().expect("log_softmax axis");
                let y = node.value.data();
                let dst = zero_slot(slots, a, g.len());
                for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(dst.chunks_mut(width)) {
                    let total = T::of(crate::scalar::sum_f64(gr));
                    for k in 0..width {
                        dr[k] += gr[k] - yr[k].exp() * total;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let table = *table;
                let st = self.val(table).shape();
                let dim = st[1];
                let dst = zero_slot(slots, table, st[0] * dim);
                for (row, &i) in g.chunks(dim).zip(indices) {
                    dst[i * dim..(i + 1) * dim].iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
            &Op::AddChannel(x, v) => {
                let sx = self.val(x).shape();
                let plane = sx[2] * sx[3];
                if self.needs(x) {
                    let dst = zero_slot(slots, x, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &e)| *d += e);
                }
                if self.needs(v) {
                    let dst = zero_slot(slots, v, sx[0] * sx[1]);
                    for (d, chunk) in dst.iter_mut().zip(g.chunks(plane)) {
                        *d += T::of(crate::scalar::sum_f64(chunk));
                    }
                }
            }
            &Op::AvgPool2(a) => {
                let s = self.val(a).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let dst = zero_slot(slots, a, numel(s));
                for (p, gp) in g.chunks(oh * ow).enumerate() {
                    let plane = &mut dst[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let share = gp[y * ow + x] * quarter;
                            let i = 2 * y * w + 2 * x;
                            plane[i] += share;
                            plane[i + 1] += share;
                            plane[i + w] += share;
                            plane[i + w + 1] += share;
                        }
                    }
                }
            }
            &Op::Upsample2(a) => {
                let s = self.val(a).shape();
                let (h, w) = (s[2], s[3]);
                let ow = 2 * w;
                let dst = zero_slot(slots, a, numel(s));
                for (p, gp) in g.chunks(4 * h * w).enumerate() {
                    let plane = &mut dst[p * h * w..(p + 1) * h * w];
                    for (k, &v) in gp.iter().enumerate() {
                        let (y, x) = (k / ow, k % ow);
                        plane[(y / 2) * w + x / 2] += v;
                    }
                }
            }
            &Op::GlobalAvgPool(a) => {
                let s = self.val(a).shape();
                let plane = s[2] * s[3];
                let inv = T::of(1.0 / plane as f64);
                let dst = zero_slot(slots, a, numel(s));
                for (chunk, &v) in dst.chunks_mut(plane).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += v * inv);
                }
            }
        }
    }
}
