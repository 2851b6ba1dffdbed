//! Computation graph recorded during the forward pass and replayed in
//! reverse to obtain gradients.
//!
//! Nodes are appended in evaluation order, so the node index is also a
//! topological order: every input of node `i` has an index `< i`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial bookkeeping shared by convolution and its transpose.
///
/// `big` is the image a forward convolution reads (`ci × h × w`), `small`
/// the image it writes (`co × oh × ow`). A transposed convolution maps
/// small to big.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    big_c: usize,
    h: usize,
    w: usize,
    small_c: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.big_c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn big_len(&self) -> usize {
        self.big_c * self.h * self.w
    }

    fn small_len(&self) -> usize {
        self.small_c * self.oh * self.ow
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    StopGradient,
    StraightThrough {
        x: Var,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    ToFibers {
        x: Var,
    },
    FromFibers {
        f: Var,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// A dynamically built computation graph over tensors of element type `T`.
///
/// A graph is single-writer; build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node it depends on.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient at `v`, or `None` when `v` does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Which of two operands, if any, is a broadcast scalar.
enum Bcast {
    None,
    Lhs,
    Rhs,
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        Ok((Bcast::None, a.to_vec()))
    } else if a.is_empty() {
        Ok((Bcast::Lhs, b.to_vec()))
    } else if b.is_empty() {
        Ok((Bcast::Rhs, a.to_vec()))
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, oh, ow) = (g.h as isize, g.w as isize, g.oh, g.ow);
    let p = g.pad as isize;
    let s = g.stride as isize;
    let mut row = 0;
    for c in 0..g.big_c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx - p;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the image.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let (h, w, oh, ow) = (g.h as isize, g.w as isize, g.oh, g.ow);
    let p = g.pad as isize;
    let s = g.stride as isize;
    let mut row = 0;
    for c in 0..g.big_c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Splits `[N,C,H,W]` or `[C,H,W]` into (batch, c, h, w, batched?).
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w, true)),
        [c, h, w] => Ok((1, c, h, w, false)),
        _ => Err(Error::shape(
            op,
            format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"),
        )),
    }
}

fn image_shape(n: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Ids of the direct inputs of `v`, in operand order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Linear { x, w, b, .. }
            | Op::Conv2d { x, w, b, .. }
            | Op::ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::MaxPool2d { x, .. }
            | Op::Upsample { x, .. }
            | Op::StraightThrough { x }
            | Op::ToFibers { x } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::FromFibers { f } => vec![*f],
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Inserts a tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (kind, shape) = bcast_kind(op, va.shape(), vb.shape())?;
        let data: Vec<T> = match kind {
            Bcast::None => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Bcast::Lhs => {
                let x = va.data()[0];
                vb.data().iter().map(|&y| f(x, y)).collect()
            }
            Bcast::Rhs => {
                let y = vb.data()[0];
                va.data().iter().map(|&x| f(x, y)).collect()
            }
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mk(a, b), Tensor::from_parts(shape, data), ng))
    }

    /// Elementwise sum; either operand may be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(op, value, ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.numel()).expect("count fits");
        let s: T = v.data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Op::Mean(a), Tensor::scalar(s / n), ng)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), ng))
    }

    /// Affine map `x·Wᵀ + b` for `x` of shape `[in]` or `[N,in]`,
    /// `W` of shape `[out,in]` and `b` of shape `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (batch, fin, batched) = match *vx.shape() {
            [n] => (1, n, false),
            [b, n] => (b, n, true),
            ref s => return Err(Error::shape("linear", format!("input {s:?}"))),
        };
        let fout = match *vw.shape() {
            [o, i] if i == fin => o,
            ref s => {
                return Err(Error::shape(
                    "linear",
                    format!("weights {s:?} for {fin} input features"),
                ))
            }
        };
        if vb.shape() != [fout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?}, expected [{fout}]", vb.shape()),
            ));
        }
        let mut out = vec![T::zero(); batch * fout];
        gemm(
            batch,
            fin,
            fout,
            vx.data(),
            false,
            vw.data(),
            true,
            &mut out,
            false,
        );
        for row in out.chunks_mut(fout) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let shape = if batched {
            vec![batch, fout]
        } else {
            vec![fout]
        };
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Op::Linear { x, w, b, batch },
            Tensor::from_parts(shape, out),
            ng,
        ))
    }

    /// Cross-correlation of `x` (`[C,H,W]` or `[N,C,H,W]`) with weights
    /// `[Co,C,kh,kw]`, plus a per-output-channel bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd, batched) = image_dims("conv2d", self.value(x).shape())?;
        let (co, kh, kw) = match *self.value(w).shape() {
            [co, ci, kh, kw] if ci == c => (co, kh, kw),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weights {s:?} for input with {c} channels"),
                ))
            }
        };
        if self.value(b).shape() != [co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?}", self.value(b).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{wd} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            batch: n,
            big_c: c,
            h,
            w: wd,
            small_c: co,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
            kh,
            kw,
            stride,
            pad,
        };
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![T::zero(); k * p];
        let mut out = vec![T::zero(); n * geom.small_len()];
        for i in 0..n {
            im2col(
                &vx.data()[i * geom.big_len()..(i + 1) * geom.big_len()],
                &geom,
                &mut col,
            );
            let dst = &mut out[i * geom.small_len()..(i + 1) * geom.small_len()];
            gemm(co, k, p, vw.data(), false, &col, false, dst, false);
            for (plane, &bv) in dst.chunks_mut(p).zip(vb.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = image_shape(n, co, geom.oh, geom.ow, batched);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Op::Conv2d { x, w, b, geom },
            Tensor::from_parts(shape, out),
            ng,
        ))
    }

    /// Transposed convolution: the adjoint of [`Graph::conv2d`] with the
    /// same weights. `x` has `Ci` channels, weights are `[Ci,Co,kh,kw]`,
    /// bias `[Co]`; output extent is `(H−1)·stride + kh − 2·pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd, batched) = image_dims("conv_transpose2d", self.value(x).shape())?;
        let (co, kh, kw) = match *self.value(w).shape() {
            [c0, co, kh, kw] if c0 == ci => (co, kh, kw),
            ref s => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("weights {s:?} for input with {ci} channels"),
                ))
            }
        };
        if self.value(b).shape() != [co] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("bias {:?}", self.value(b).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose2d", "stride must be positive"));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("padding {pad} leaves no output for {h}×{wd} input"),
            ));
        }
        let geom = ConvGeom {
            batch: n,
            big_c: co,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            small_c: ci,
            oh: h,
            ow: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![T::zero(); k * p];
        let mut out = vec![T::zero(); n * geom.big_len()];
        let plane = geom.h * geom.w;
        for i in 0..n {
            let src = &vx.data()[i * geom.small_len()..(i + 1) * geom.small_len()];
            gemm(k, ci, p, vw.data(), true, src, false, &mut col, false);
            let dst = &mut out[i * geom.big_len()..(i + 1) * geom.big_len()];
            col2im(&col, &geom, dst);
            for (pl, &bv) in dst.chunks_mut(plane).zip(vb.data()) {
                pl.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = image_shape(n, co, geom.h, geom.w, batched);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Op::ConvTranspose2d { x, w, b, geom },
            Tensor::from_parts(shape, out),
            ng,
        ))
    }

    /// Non-overlapping max pooling (window == stride). Ties resolve to
    /// the first maximal entry in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (n, c, h, w, batched) = image_dims("max_pool2d", self.value(x).shape())?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("{h}×{w} not divisible by window {window}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Op::MaxPool2d { x, argmax },
            Tensor::from_parts(image_shape(n, c, oh, ow, batched), out),
            ng,
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w, batched) = image_dims("upsample_nearest", self.value(x).shape())?;
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be ≥ 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                let srow = &src[plane * h * w + (y / factor) * w..][..w];
                let drow = &mut out[plane * oh * ow + y * ow..][..ow];
                for (xo, v) in drow.iter_mut().enumerate() {
                    *v = srow[xo / factor];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Op::Upsample { x, factor },
            Tensor::from_parts(image_shape(n, c, oh, ow, batched), out),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        let mut value = value;
        value.set_requires_grad(false);
        Ok(self.push(Op::Reshape(x), value, ng))
    }

    /// Copy of `x` that is excluded from differentiation.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.set_requires_grad(false);
        self.push(Op::StopGradient, value, false)
    }

    /// Forward value of `target`, backward gradient routed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, target: Var) -> Result<Var> {
        if self.value(x).shape() != self.value(target).shape() {
            return Err(Error::shape(
                "straight_through",
                format!(
                    "{:?} vs {:?}",
                    self.value(x).shape(),
                    self.value(target).shape()
                ),
            ));
        }
        let mut value = self.value(target).clone();
        value.set_requires_grad(false);
        let ng = self.ng(x);
        Ok(self.push(Op::StraightThrough { x }, value, ng))
    }

    /// Selects rows of a `[K,C]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (k, c) = match *vt.shape() {
            [k, c] => (k, c),
            ref s => return Err(Error::shape("gather_rows", format!("table {s:?}"))),
        };
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= k {
                return Err(Error::shape("gather_rows", format!("row {i} of {k}")));
            }
            out.extend_from_slice(&vt.data()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            Tensor::from_parts(vec![indices.len(), c], out),
            ng,
        ))
    }

    /// `[N,C,H,W]` (or `[C,H,W]`) → `[N·H·W, C]`: one row per channel fibre.
    pub fn to_fibers(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w, _) = image_dims("to_fibers", self.value(x).shape())?;
        let src = self.value(x).data();
        let hw = h * w;
        let mut out = vec![T::zero(); n * hw * c];
        for i in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    out[(i * hw + s) * c + ch] = src[(i * c + ch) * hw + s];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Op::ToFibers { x },
            Tensor::from_parts(vec![n * hw, c], out),
            ng,
        ))
    }

    /// Inverse of [`Graph::to_fibers`] for the given image shape.
    pub fn from_fibers(&mut self, f: Var, shape: &[usize]) -> Result<Var> {
        let (n, c, h, w, _) = image_dims("from_fibers", shape)?;
        let hw = h * w;
        if self.value(f).shape() != [n * hw, c] {
            return Err(Error::shape(
                "from_fibers",
                format!("{:?} cannot form {shape:?}", self.value(f).shape()),
            ));
        }
        let src = self.value(f).data();
        let mut out = vec![T::zero(); n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    out[(i * c + ch) * hw + s] = src[(i * hw + s) * c + ch];
                }
            }
        }
        let ng = self.ng(f);
        Ok(self.push(
            Op::FromFibers { f },
            Tensor::from_parts(shape.to_vec(), out),
            ng,
        ))
    }

    /// Reverse sweep from a rank-0 `loss`.
    ///
    /// Gradients are freshly zeroed on every call and accumulate additively
    /// over fan-out. Nodes the loss does not depend on differentiably have
    /// no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.propagate(i, g, lo);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], lo: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.reduce_into(*a, g, T::one(), lo);
                self.reduce_into(*b, g, sign, lo);
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if !self.ng(x) {
                        continue;
                    }
                    let other = self.value(y).data();
                    let prod: Vec<T> = if other.len() == 1 && g.len() != 1 {
                        g.iter().map(|&gi| gi * other[0]).collect()
                    } else {
                        g.iter().zip(other).map(|(&gi, &o)| gi * o).collect()
                    };
                    self.reduce_into(x, &prod, T::one(), lo);
                }
            }
            Op::Scale(a, c) => self.elementwise(*a, g, lo, |gi, _| gi * *c),
            Op::Offset(a) | Op::Reshape(a) => self.elementwise(*a, g, lo, |gi, _| gi),
            Op::Exp(a) => {
                let y = out.data();
                self.elementwise(*a, g, lo, |gi, k| gi * y[k]);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::one() + T::one();
                self.elementwise(*a, g, lo, |gi, k| two * x[k] * gi);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.elementwise(
                    *a,
                    g,
                    lo,
                    |gi, k| if x[k] > T::zero() { gi } else { T::zero() },
                );
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.elementwise(*a, g, lo, |gi, k| gi * y[k] * (T::one() - y[k]));
            }
            Op::Sum(a) => self.elementwise(*a, &[], lo, |_, _| g[0]),
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel()).expect("count fits");
                let gi = g[0] / n;
                self.elementwise(*a, &[], lo, |_, _| gi);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.ng(*a) {
                    let s = slot(lo, *a, m * k);
                    gemm(m, n, k, g, false, vb.data(), true, s, true);
                }
                if self.ng(*b) {
                    let s = slot(lo, *b, k * n);
                    gemm(k, m, n, va.data(), true, g, false, s, true);
                }
            }
            Op::Linear { x, w, b, batch } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (fout, fin) = (vw.shape()[0], vw.shape()[1]);
                if self.ng(*x) {
                    let s = slot(lo, *x, batch * fin);
                    gemm(*batch, fout, fin, g, false, vw.data(), false, s, true);
                }
                if self.ng(*w) {
                    let s = slot(lo, *w, fout * fin);
                    gemm(fout, *batch, fin, g, true, vx.data(), false, s, true);
                }
                if self.ng(*b) {
                    let s = slot(lo, *b, fout);
                    for row in g.chunks(fout) {
                        for (acc, &gi) in s.iter_mut().zip(row) {
                            *acc += gi;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, lo),
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_transpose_backward(*x, *w, *b, geom, g, lo)
            }
            Op::MaxPool2d { x, argmax } => {
                if self.ng(*x) {
                    let s = slot(lo, *x, self.value(*x).numel());
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        s[idx] += gi;
                    }
                }
            }
            Op::Upsample { x, factor } => {
                if self.ng(*x) {
                    let (n, c, h, w, _) =
                        image_dims("upsample_nearest", self.value(*x).shape()).expect("checked");
                    let (oh, ow) = (h * factor, w * factor);
                    let s = slot(lo, *x, n * c * h * w);
                    for plane in 0..n * c {
                        for y in 0..oh {
                            let grow = &g[plane * oh * ow + y * ow..][..ow];
                            let srow = &mut s[plane * h * w + (y / factor) * w..][..w];
                            for (xo, &gi) in grow.iter().enumerate() {
                                srow[xo / factor] += gi;
                            }
                        }
                    }
                }
            }
            Op::StraightThrough { x } => self.elementwise(*x, g, lo, |gi, _| gi),
            Op::GatherRows { table, indices } => {
                if self.ng(*table) {
                    let c = self.value(*table).shape()[1];
                    let s = slot(lo, *table, self.value(*table).numel());
                    for (r, &i) in indices.iter().enumerate() {
                        for (acc, &gi) in s[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..]) {
                            *acc += gi;
                        }
                    }
                }
            }
            Op::ToFibers { x } => {
                if self.ng(*x) {
                    let (n, c, h, w, _) =
                        image_dims("to_fibers", self.value(*x).shape()).expect("checked");
                    let hw = h * w;
                    let s = slot(lo, *x, n * c * hw);
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                s[(i * c + ch) * hw + p] += g[(i * hw + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::FromFibers { f } => {
                if self.ng(*f) {
                    let (n, c, h, w, _) = image_dims("from_fibers", out.shape()).expect("checked");
                    let hw = h * w;
                    let s = slot(lo, *f, n * c * hw);
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                s[(i * hw + p) * c + ch] += g[(i * c + ch) * hw + p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates `f(g_k, k)` into the gradient of `a`, elementwise.
    fn elementwise(&self, a: Var, g: &[T], lo: &mut [Option<Vec<T>>], f: impl Fn(T, usize) -> T) {
        if !self.ng(a) {
            return;
        }
        let n = self.value(a).numel();
        let s = slot(lo, a, n);
        for (k, acc) in s.iter_mut().enumerate() {
            *acc += f(g.get(k).copied().unwrap_or_else(T::zero), k);
        }
    }

    /// Accumulates `sign·g` into `a`, summing when `a` was a broadcast scalar.
    fn reduce_into(&self, a: Var, g: &[T], sign: T, lo: &mut [Option<Vec<T>>]) {
        if !self.ng(a) {
            return;
        }
        let n = self.value(a).numel();
        let s = slot(lo, a, n);
        if n == g.len() {
            for (acc, &gi) in s.iter_mut().zip(g) {
                *acc += sign * gi;
            }
        } else {
            let total: T = g.iter().copied().sum();
            s[0] += sign * total;
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        g: &[T],
        lo: &mut [Option<Vec<T>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (k, p, co) = (geom.col_rows(), geom.col_cols(), geom.small_c);
        let mut col = vec![T::zero(); k * p];
        let mut dcol = vec![T::zero(); k * p];
        let (need_x, need_w) = (self.ng(x), self.ng(w));
        for i in 0..geom.batch {
            let gi = &g[i * geom.small_len()..(i + 1) * geom.small_len()];
            if need_w {
                im2col(
                    &vx.data()[i * geom.big_len()..][..geom.big_len()],
                    geom,
                    &mut col,
                );
                let s = slot(lo, w, co * k);
                gemm(co, p, k, gi, false, &col, true, s, true);
            }
            if need_x {
                gemm(k, co, p, vw.data(), true, gi, false, &mut dcol, false);
                let s = slot(lo, x, geom.batch * geom.big_len());
                col2im(&dcol, geom, &mut s[i * geom.big_len()..][..geom.big_len()]);
            }
        }
        if self.ng(b) {
            let s = slot(lo, b, co);
            for (plane_idx, plane) in g.chunks(p).enumerate() {
                s[plane_idx % co] += plane.iter().copied().sum();
            }
        }
    }

    fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        g: &[T],
        lo: &mut [Option<Vec<T>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (k, p, ci) = (geom.col_rows(), geom.col_cols(), geom.small_c);
        let mut gcol = vec![T::zero(); k * p];
        let (need_x, need_w) = (self.ng(x), self.ng(w));
        for i in 0..geom.batch {
            if !(need_x || need_w) {
                break;
            }
            im2col(&g[i * geom.big_len()..][..geom.big_len()], geom, &mut gcol);
            if need_x {
                let s = slot(lo, x, geom.batch * geom.small_len());
                gemm(
                    ci,
                    k,
                    p,
                    vw.data(),
                    false,
                    &gcol,
                    false,
                    &mut s[i * geom.small_len()..][..geom.small_len()],
                    true,
                );
            }
            if need_w {
                let s = slot(lo, w, ci * k);
                let xi = &vx.data()[i * geom.small_len()..][..geom.small_len()];
                gemm(ci, p, k, xi, false, &gcol, true, s, true);
            }
        }
        if self.ng(b) {
            let co = geom.big_c;
            let plane = geom.h * geom.w;
            let s = slot(lo, b, co);
            for (plane_idx, pl) in g.chunks(plane).enumerate() {
                s[plane_idx % co] += pl.iter().copied().sum();
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
