//! Primitive operations: forward evaluation and their vector-Jacobian products.

use rand::Rng;

use super::{contract, Graph, Node, Op, Result, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stride and zero padding of a 2-D cross-correlation, `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Window and stride of a 2-D max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

/// `floor((input + 2·padding − kernel) / stride) + 1`, or `None` when the
/// window does not fit.
pub fn window_output(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
    let sa = g.shape(a)?;
    let sb = g.shape(b)?;
    if sa != sb {
        return contract(format!("{op}: shape mismatch {sa:?} vs {sb:?}"));
    }
    Ok(sa.to_vec())
}

impl<T: Real> Graph<T> {
    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let shape = same_shape(self, a, b, op.name())?;
        let va = self.value(a)?.data();
        let vb = self.value(b)?.data();
        let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, Tensor::from_parts(shape, data))
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x)?.map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.map_unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Result<Var> {
        self.map_unary(x, Op::AddScalar(x), |v| v + offset)
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        let bs = self.shape(bias)?;
        if xs.len() < 2 || bs != [xs[1]] {
            return contract(format!(
                "add_bias: bias {bs:?} does not match axis 1 of {xs:?}"
            ));
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias)?.data().to_vec();
        let mut data = self.value(x)?.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + b[(i / inner) % channels];
        }
        self.push(Op::AddBias { x, bias }, Tensor::from_parts(xs, data))
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a)?.to_vec();
        let sb = self.shape(b)?.to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return contract(format!("matmul: incompatible shapes {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a)?.data(),
            false,
            self.value(b)?.data(),
            false,
            T::zero(),
            &mut out,
        );
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    /// Cross-correlation of `x: (N, C, H, W)` with `w: (O, C, KH, KW)`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        let ws = self.shape(w)?.to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return contract(format!(
                "conv2d: input {xs:?} incompatible with kernel {ws:?}"
            ));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (Some(oh), Some(ow)) = (
            window_output(h, kh, geom.stride.0, geom.padding.0),
            window_output(wd, kw, geom.stride.1, geom.padding.1),
        ) else {
            return contract(format!(
                "conv2d: kernel {kh}x{kw} does not fit input {h}x{wd}"
            ));
        };
        let ckk = c * kh * kw;
        let p = oh * ow;
        let xv = self.value(x)?.data();
        let wv = self.value(w)?.data();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); ckk * p];
        let dims = Im2Col {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            geom,
        };
        for b in 0..n {
            dims.im2col(&xv[b * c * h * wd..(b + 1) * c * h * wd], &mut cols);
            T::gemm(
                o,
                ckk,
                p,
                T::one(),
                wv,
                false,
                &cols,
                false,
                T::zero(),
                &mut out[b * o * p..(b + 1) * o * p],
            );
        }
        self.push(
            Op::Conv2d { x, w, geom },
            Tensor::from_parts(vec![n, o, oh, ow], out),
        )
    }

    /// Max pooling over `x: (N, C, H, W)`. Ties resolve to the first maximal
    /// element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        if xs.len() != 4 {
            return contract(format!("max_pool2d: expected 4-D input, got {xs:?}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(oh), Some(ow)) = (
            window_output(h, geom.kernel.0, geom.stride.0, 0),
            window_output(w, geom.kernel.1, geom.stride.1, 0),
        ) else {
            return contract(format!(
                "max_pool2d: window {:?} does not fit input {h}x{w}",
                geom.kernel
            ));
        };
        let xv = self.value(x)?.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * geom.stride.0 * w + j * geom.stride.1;
                    for di in 0..geom.kernel.0 {
                        let row = base + (i * geom.stride.0 + di) * w + j * geom.stride.1;
                        for idx in row..row + geom.kernel.1 {
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(
            Op::MaxPool2d { x, argmax },
            Tensor::from_parts(vec![n, c, oh, ow], out),
        )
    }

    /// Gradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(
            x,
            Op::Relu(x),
            |v| if v > T::zero() { v } else { T::zero() },
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = softmax_last_axis(self.value(x)?);
        self.push(Op::Softmax(x), value)
    }

    /// Gradient passes where `lo <= x <= hi`, zero elsewhere.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return contract(format!("clamp: empty interval [{lo}, {hi}]"));
        }
        self.map_unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Batch normalization with batch statistics over every axis except 1.
    /// Also returns the batch mean and unbiased batch variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (xs, channels, inner) = self.bn_dims(x, gamma, beta)?;
        let n = xs[0];
        let count = n * inner;
        if count < 2 {
            return contract(format!(
                "batch_norm: needs at least 2 values per channel, input {xs:?}"
            ));
        }
        let xv = self.value(x)?.data();
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for_each_channel(n, channels, inner, |c, idx| mean[c] = mean[c] + xv[idx]);
        let m = T::c(count as f64);
        for mu in mean.iter_mut() {
            *mu = *mu / m;
        }
        for_each_channel(n, channels, inner, |c, idx| {
            let d = xv[idx] - mean[c];
            var[c] = var[c] + d * d;
        });
        for v in var.iter_mut() {
            *v = *v / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| v * m / T::c((count - 1) as f64))
            .collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, &xs, channels, inner)?;
        let out = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            value,
        )?;
        Ok((out, mean, unbiased))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (xs, channels, inner) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != channels || var.len() != channels {
            return contract("batch_norm_fixed: statistics length does not match channels");
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, &xs, channels, inner)?;
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            value,
        )
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(Vec<usize>, usize, usize)> {
        let xs = self.shape(x)?.to_vec();
        if xs.len() < 2 {
            return contract(format!(
                "batch_norm: expected (N, C, ...) input, got {xs:?}"
            ));
        }
        let channels = xs[1];
        if self.shape(gamma)? != [channels] || self.shape(beta)? != [channels] {
            return contract(format!(
                "batch_norm: scale/shift must have shape [{channels}]"
            ));
        }
        let inner = xs[2..].iter().product();
        Ok((xs, channels, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        xs: &[usize],
        channels: usize,
        inner: usize,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let xv = self.value(x)?.data();
        let gv = self.value(gamma)?.data();
        let bv = self.value(beta)?.data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for_each_channel(xs[0], channels, inner, |c, idx| {
            let h = (xv[idx] - mean[c]) * inv_std[c];
            xhat[idx] = h;
            out[idx] = gv[c] * h + bv[c];
        });
        Ok((Tensor::from_parts(xs.to_vec(), out), xhat))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return contract(format!("dropout: probability {p} outside [0, 1)"));
        }
        let keep = T::c(1.0 / (1.0 - p));
        let xv = self.value(x)?;
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(Op::Dropout { x, mask }, value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x)?.clone();
        let from = value.shape().to_vec();
        match value.reshaped(shape.to_vec()) {
            Ok(v) => self.push(Op::Reshape(x), v),
            Err(_) => contract(format!("reshape: cannot view {from:?} as {shape:?}")),
        }
    }

    /// `(N, ...)` → `(N, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        if xs.is_empty() {
            return contract("flatten: scalar input");
        }
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[xs[0], rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x)?.data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        if v.is_empty() {
            return contract("mean: empty tensor");
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::c(v.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat: no inputs");
        };
        let inner = self.shape(first)?[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p)?;
            if v.shape().len() != inner.len() + 1 || v.shape()[1..] != inner[..] {
                return contract(format!(
                    "concat: {:?} does not match trailing {inner:?}",
                    v.shape()
                ));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(inner);
        self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(shape, data))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x)?;
        if v.shape().is_empty() || start > end || end > v.shape()[0] {
            return contract(format!(
                "slice_rows: {start}..{end} out of range for {:?}",
                v.shape()
            ));
        }
        let value = v.slice_rows(start, end);
        self.push(Op::SliceRows { x, start }, value)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_last_axis<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().unwrap_or(&1);
    let mut data = x.data().to_vec();
    if last > 0 {
        for row in data.chunks_mut(last) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn for_each_channel(n: usize, channels: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..n {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            for idx in base..base + inner {
                f(c, idx);
            }
        }
    }
}

struct Im2Col {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl Im2Col {
    /// Input position of output `(o, k)` along one axis, if inside the input.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = o * stride + k;
        (pos >= pad && pos - pad < len).then(|| pos - pad)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.oh * self.ow;
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ch * self.kh + ki) * self.kw + kj) * p;
                    for i in 0..self.oh {
                        let dst = &mut cols[row + i * self.ow..row + (i + 1) * self.ow];
                        match Self::source(i, ki, self.geom.stride.0, self.geom.padding.0, self.h) {
                            None => dst.fill(T::zero()),
                            Some(ih) => {
                                let src = &x
                                    [(ch * self.h + ih) * self.w..(ch * self.h + ih + 1) * self.w];
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d = match Self::source(
                                        j,
                                        kj,
                                        self.geom.stride.1,
                                        self.geom.padding.1,
                                        self.w,
                                    ) {
                                        Some(iw) => src[iw],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.oh * self.ow;
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ch * self.kh + ki) * self.kw + kj) * p;
                    for i in 0..self.oh {
                        let Some(ih) =
                            Self::source(i, ki, self.geom.stride.0, self.geom.padding.0, self.h)
                        else {
                            continue;
                        };
                        let dst =
                            &mut dx[(ch * self.h + ih) * self.w..(ch * self.h + ih + 1) * self.w];
                        for j in 0..self.ow {
                            if let Some(iw) =
                                Self::source(j, kj, self.geom.stride.1, self.geom.padding.1, self.w)
                            {
                                dst[iw] = dst[iw] + cols[row + i * self.ow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Whether gradient should flow into `v`: constants are skipped, as are
/// subtrees containing no parameter.
fn wants_grad<T>(nodes: &[Node<T>], v: Var) -> bool {
    needs_grad(nodes, v.index)
}

fn needs_grad<T>(nodes: &[Node<T>], index: usize) -> bool {
    !matches!(nodes[index].op, Op::Constant)
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, delta: Vec<T>) {
    if !wants_grad(nodes, v) {
        return;
    }
    match &mut grads[v.index] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Pushes the output gradient `g` of node `i` into its inputs.
pub(super) fn propagate<T: Real>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.index].value;
    match &node.op {
        Op::Constant | Op::Param(_) => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|&x| -x).collect());
        }
        Op::Mul(a, b) => {
            if wants_grad(nodes, *a) {
                let d = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, nodes, *a, d);
            }
            if wants_grad(nodes, *b) {
                let d = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, nodes, *b, d);
            }
        }
        Op::Scale(x, f) => accumulate(grads, nodes, *x, g.iter().map(|&v| v * *f).collect()),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::AddBias { x, bias } => {
            accumulate(grads, nodes, *x, g.to_vec());
            if wants_grad(nodes, *bias) {
                let xs = node.value.shape();
                let channels = xs[1];
                let inner: usize = xs[2..].iter().product();
                let mut db = vec![T::zero(); channels];
                for (idx, &v) in g.iter().enumerate() {
                    let c = (idx / inner) % channels;
                    db[c] = db[c] + v;
                }
                accumulate(grads, nodes, *bias, db);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants_grad(nodes, *a) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    false,
                    val(*b).data(),
                    true,
                    T::zero(),
                    &mut da,
                );
                accumulate(grads, nodes, *a, da);
            }
            if wants_grad(nodes, *b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    val(*a).data(),
                    true,
                    g,
                    false,
                    T::zero(),
                    &mut db,
                );
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Conv2d { x, w, geom } => {
            let xs = val(*x).shape();
            let ws = val(*w).shape();
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (o, kh, kw) = (ws[0], ws[2], ws[3]);
            let os = node.value.shape();
            let (oh, ow) = (os[2], os[3]);
            let (ckk, p) = (c * kh * kw, oh * ow);
            let dims = Im2Col {
                c,
                h,
                w: wd,
                kh,
                kw,
                oh,
                ow,
                geom: *geom,
            };
            let want_x = wants_grad(nodes, *x);
            let want_w = wants_grad(nodes, *w);
            let mut dw = vec![T::zero(); o * ckk];
            let mut dx = vec![T::zero(); if want_x { n * c * h * wd } else { 0 }];
            let mut cols = vec![T::zero(); ckk * p];
            let plane = c * h * wd;
            for b in 0..n {
                let gy = &g[b * o * p..(b + 1) * o * p];
                if want_w {
                    dims.im2col(&val(*x).data()[b * plane..(b + 1) * plane], &mut cols);
                    T::gemm(
                        o,
                        p,
                        ckk,
                        T::one(),
                        gy,
                        false,
                        &cols,
                        true,
                        T::one(),
                        &mut dw,
                    );
                }
                if want_x {
                    T::gemm(
                        ckk,
                        o,
                        p,
                        T::one(),
                        val(*w).data(),
                        true,
                        gy,
                        false,
                        T::zero(),
                        &mut cols,
                    );
                    dims.col2im(&cols, &mut dx[b * plane..(b + 1) * plane]);
                }
            }
            if want_w {
                accumulate(grads, nodes, *w, dw);
            }
            if want_x {
                accumulate(grads, nodes, *x, dx);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let mut dx = vec![T::zero(); val(*x).len()];
            for (&src, &v) in argmax.iter().zip(g) {
                dx[src] = dx[src] + v;
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Relu(x) => {
            let d = g
                .iter()
                .zip(val(*x).data())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Log(x) => {
            let d = g
                .iter()
                .zip(val(*x).data())
                .map(|(&gv, &xv)| gv / xv)
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Exp(x) => {
            let d = g
                .iter()
                .zip(node.value.data())
                .map(|(&gv, &y)| gv * y)
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Sigmoid(x) => {
            let d = g
                .iter()
                .zip(node.value.data())
                .map(|(&gv, &y)| gv * y * (T::one() - y))
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Softmax(x) => {
            let last = *node.value.shape().last().unwrap_or(&1);
            let mut d = vec![T::zero(); g.len()];
            for ((dr, gr), yr) in d
                .chunks_mut(last)
                .zip(g.chunks(last))
                .zip(node.value.data().chunks(last))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::Clamp { x, lo, hi } => {
            let d = g
                .iter()
                .zip(val(*x).data())
                .map(|(&gv, &xv)| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let xs = node.value.shape();
            let (n, channels) = (xs[0], xs[1]);
            let inner: usize = xs[2..].iter().product();
            let gv = val(*gamma).data();
            let mut dgamma = vec![T::zero(); channels];
            let mut dbeta = vec![T::zero(); channels];
            for_each_channel(n, channels, inner, |c, idx| {
                dgamma[c] = dgamma[c] + g[idx] * xhat[idx];
                dbeta[c] = dbeta[c] + g[idx];
            });
            if wants_grad(nodes, *x) {
                let mut dx = vec![T::zero(); g.len()];
                if *batch_stats {
                    // dx = γ·σ⁻¹/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                    let m = T::c((n * inner) as f64);
                    for_each_channel(n, channels, inner, |c, idx| {
                        dx[idx] = gv[c] * inv_std[c] / m
                            * (m * g[idx] - dbeta[c] - xhat[idx] * dgamma[c]);
                    });
                } else {
                    for_each_channel(n, channels, inner, |c, idx| {
                        dx[idx] = g[idx] * gv[c] * inv_std[c];
                    });
                }
                accumulate(grads, nodes, *x, dx);
            }
            accumulate(grads, nodes, *gamma, dgamma);
            accumulate(grads, nodes, *beta, dbeta);
        }
        Op::Dropout { x, mask } => {
            let d = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Sum(x) => accumulate(grads, nodes, *x, vec![g[0]; val(*x).len()]),
        Op::Mean(x) => {
            let len = val(*x).len();
            accumulate(grads, nodes, *x, vec![g[0] / T::c(len as f64); len]);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                accumulate(grads, nodes, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let row: usize = xv.shape()[1..].iter().product();
            let mut d = vec![T::zero(); xv.len()];
            d[start * row..start * row + g.len()].copy_from_slice(g);
            accumulate(grads, nodes, *x, d);
        }
    }
}
