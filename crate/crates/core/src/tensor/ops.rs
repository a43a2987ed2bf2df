//! Differentiable primitive operations.
//!
//! Binary arithmetic broadcasts over axes of size 1 (the gradient sums back
//! over broadcast axes). Layout ops (`reshape`, `permute`, `concat`,
//! `narrow`, `index_select`) copy data; their backwards route gradients
//! through the inverse index mapping.

use super::scalar::Scalar;
use super::tape::{record, should_record};
use super::{screen_nonfinite, Shape, Tensor};
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0usize; 4];
    for axis in 0..4 {
        let (da, db) = (a.0[axis], b.0[axis]);
        out[axis] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(axis, format!("cannot broadcast {} with {}", a, b)));
        };
    }
    Ok(Shape(out))
}

/// Sums `grad` (shaped `out`) back onto the broadcast input shape `src`.
fn reduce_to_shape<T: Scalar>(grad: &[T], out: Shape, src: Shape) -> Vec<T> {
    if out == src {
        return grad.to_vec();
    }
    let mut reduced = vec![T::zero(); src.numel()];
    let ss = src.broadcast_strides();
    let [on, oc, oh, ow] = out.0;
    let mut i = 0;
    for n in 0..on {
        for c in 0..oc {
            for h in 0..oh {
                let base = n * ss[0] + c * ss[1] + h * ss[2];
                for w in 0..ow {
                    reduced[base + w * ss[3]] += grad[i];
                    i += 1;
                }
            }
        }
    }
    reduced
}

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $da:expr, $db:expr) => {
        pub fn $name<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
            let out_shape = broadcast_shape(a.shape(), b.shape())?;
            let numel = out_shape.numel();
            let mut data = Vec::with_capacity(numel);
            {
                let (ad, bd) = (a.data(), b.data());
                if a.shape() == b.shape() {
                    for i in 0..numel {
                        data.push($fwd(ad[i], bd[i]));
                    }
                } else {
                    let sa = a.shape().broadcast_strides();
                    let sb = b.shape().broadcast_strides();
                    let [on, oc, oh, ow] = out_shape.0;
                    for n in 0..on {
                        for c in 0..oc {
                            for h in 0..oh {
                                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                                for w in 0..ow {
                                    data.push($fwd(ad[ba + w * sa[3]], bd[bb + w * sb[3]]));
                                }
                            }
                        }
                    }
                }
            }
            let out = Tensor::from_vec(out_shape, data)?;
            let out = if a.requires_grad() || b.requires_grad() {
                out.with_requires_grad_internal()
            } else {
                out
            };
            screen_nonfinite($opname, &out);
            if should_record::<T>(out.requires_grad()) {
                let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
                record::<T>($opname, move || {
                    let guard = o2.grad_ref();
                    let Some(g) = guard.as_ref() else { return };
                    let (ad, bd) = (a2.data(), b2.data());
                    let same = a2.shape() == b2.shape();
                    let sa = a2.shape().broadcast_strides();
                    let sb = b2.shape().broadcast_strides();
                    let [on, oc, oh, ow] = o2.shape().0;
                    if a2.requires_grad() {
                        if same {
                            a2.with_grad_mut(|ga| {
                                for i in 0..g.len() {
                                    ga[i] += g[i] * $da(ad[i], bd[i]);
                                }
                            });
                        } else {
                            let mut ga = vec![T::zero(); o2.shape().numel()];
                            let mut i = 0;
                            for n in 0..on {
                                for c in 0..oc {
                                    for h in 0..oh {
                                        let ba = n * sa[0] + c * sa[1] + h * sa[2];
                                        let bb = n * sb[0] + c * sb[1] + h * sb[2];
                                        for w in 0..ow {
                                            ga[i] = g[i]
                                                * $da(ad[ba + w * sa[3]], bd[bb + w * sb[3]]);
                                            i += 1;
                                        }
                                    }
                                }
                            }
                            let r = reduce_to_shape(&ga, o2.shape(), a2.shape());
                            a2.accumulate_grad(&r);
                        }
                    }
                    if b2.requires_grad() {
                        if same {
                            b2.with_grad_mut(|gb| {
                                for i in 0..g.len() {
                                    gb[i] += g[i] * $db(ad[i], bd[i]);
                                }
                            });
                        } else {
                            let mut gb = vec![T::zero(); o2.shape().numel()];
                            let mut i = 0;
                            for n in 0..on {
                                for c in 0..oc {
                                    for h in 0..oh {
                                        let ba = n * sa[0] + c * sa[1] + h * sa[2];
                                        let bb = n * sb[0] + c * sb[1] + h * sb[2];
                                        for w in 0..ow {
                                            gb[i] = g[i]
                                                * $db(ad[ba + w * sa[3]], bd[bb + w * sb[3]]);
                                            i += 1;
                                        }
                                    }
                                }
                            }
                            let r = reduce_to_shape(&gb, o2.shape(), b2.shape());
                            b2.accumulate_grad(&r);
                        }
                    }
                });
            }
            Ok(out)
        }
    };
}

binary_op!(add, "add", |x: T, y: T| x + y, |_x, _y| T::one(), |_x, _y| T::one());
binary_op!(sub, "sub", |x: T, y: T| x - y, |_x, _y| T::one(), |_x, _y| -T::one());
binary_op!(mul, "mul", |x: T, y: T| x * y, |_x, y: T| y, |x: T, _y| x);

impl<T: Scalar> Tensor<T> {
    pub(crate) fn with_requires_grad_internal(self) -> Self {
        // Freshly created op output; never aliased yet.
        if self.requires_grad() {
            self
        } else {
            self.mark_requires_grad()
        }
    }

    fn mark_requires_grad(self) -> Self {
        use std::rc::Rc;
        match Rc::try_unwrap(self.0) {
            Ok(inner) => Tensor(Rc::new(super::Inner { requires_grad: true, ..inner })),
            Err(_) => panic!("mark_requires_grad on shared tensor"),
        }
    }
}

/// Adds a per-channel bias `(1,C,1,1)` onto `x`.
pub fn bias_add<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let bs = bias.shape();
    if bs.n() != 1 || bs.h() != 1 || bs.w() != 1 || bs.c() != x.shape().c() {
        return Err(Error::shape(1, format!("bias {} not (1,{},1,1)", bs, x.shape().c())));
    }
    add(x, bias)
}

macro_rules! unary_op {
    ($name:ident, $opname:literal, $fwd:expr, $dfdx:expr) => {
        pub fn $name<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
            let data: Vec<T> = x.data().iter().map(|&v| $fwd(v)).collect();
            let out = Tensor::from_vec(x.shape(), data)?;
            let out =
                if x.requires_grad() { out.with_requires_grad_internal() } else { out };
            screen_nonfinite($opname, &out);
            if should_record::<T>(out.requires_grad()) {
                let (x2, o2) = (x.clone(), out.clone());
                record::<T>($opname, move || {
                    let guard = o2.grad_ref();
                    let Some(g) = guard.as_ref() else { return };
                    let xd = x2.data();
                    let od = o2.data();
                    x2.with_grad_mut(|gx| {
                        for i in 0..g.len() {
                            gx[i] += g[i] * $dfdx(xd[i], od[i]);
                        }
                    });
                });
            }
            Ok(out)
        }
    };
}

unary_op!(
    sigmoid,
    "sigmoid",
    |v: T| T::one() / (T::one() + (-v).exp()),
    |_x, y: T| y * (T::one() - y)
);
unary_op!(
    relu,
    "relu",
    |v: T| if v > T::zero() { v } else { T::zero() },
    |x: T, _y| if x > T::zero() { T::one() } else { T::zero() }
);

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| v + k).collect();
    let out = Tensor::from_vec(x.shape(), data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("add_scalar", &out);
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("add_scalar", move || {
            let guard = o2.grad_ref();
            if let Some(g) = guard.as_ref() {
                x2.accumulate_grad(g);
            }
        });
    }
    Ok(out)
}

pub fn mul_scalar<T: Scalar>(x: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| v * k).collect();
    let out = Tensor::from_vec(x.shape(), data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("mul_scalar", &out);
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("mul_scalar", move || {
            let guard = o2.grad_ref();
            if let Some(g) = guard.as_ref() {
                x2.with_grad_mut(|gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * k;
                    }
                });
            }
        });
    }
    Ok(out)
}

/// Index decomposition helpers for axis-generic loops.
#[inline(always)]
fn unravel(shape: Shape, mut i: usize) -> [usize; 4] {
    let [_, c, h, w] = shape.0;
    let iw = i % w;
    i /= w;
    let ih = i % h;
    i /= h;
    let ic = i % c;
    let in_ = i / c;
    [in_, ic, ih, iw]
}

/// Numerically stable softmax over one axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis > 3 {
        return Err(Error::config(format!("softmax axis {axis} out of range 0..=3")));
    }
    let shape = x.shape();
    let len = shape.0[axis];
    if len == 0 {
        return Err(Error::shape(axis, "softmax over axis of length 0"));
    }
    let stride = shape.broadcast_strides_full()[axis];
    let numel = shape.numel();
    let lanes = numel / len;
    let mut data = vec![T::zero(); numel];
    {
        let xd = x.data();
        for lane in 0..lanes {
            let base = lane_base(shape, axis, lane);
            let mut maxv = T::neg_infinity();
            for k in 0..len {
                maxv = maxv.max(xd[base + k * stride]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (xd[base + k * stride] - maxv).exp();
                data[base + k * stride] = e;
                sum += e;
            }
            for k in 0..len {
                data[base + k * stride] = data[base + k * stride] / sum;
            }
        }
    }
    let out = Tensor::from_vec(shape, data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("softmax", &out);
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("softmax", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let od = o2.data();
            x2.with_grad_mut(|gx| {
                for lane in 0..lanes {
                    let base = lane_base(x2.shape(), axis, lane);
                    let mut dot = T::zero();
                    for k in 0..len {
                        let i = base + k * stride;
                        dot += g[i] * od[i];
                    }
                    for k in 0..len {
                        let i = base + k * stride;
                        gx[i] += od[i] * (g[i] - dot);
                    }
                }
            });
        });
    }
    Ok(out)
}

impl Shape {
    /// Row-major strides without broadcast zeroing.
    #[inline]
    pub(crate) fn broadcast_strides_full(&self) -> [usize; 4] {
        let s3 = 1;
        let s2 = self.0[3];
        let s1 = self.0[2] * s2;
        let s0 = self.0[1] * s1;
        [s0, s1, s2, s3]
    }
}

/// Flat offset of the `lane`-th 1-D slice along `axis`.
#[inline(always)]
fn lane_base(shape: Shape, axis: usize, lane: usize) -> usize {
    let strides = shape.broadcast_strides_full();
    let mut dims = shape.0;
    dims[axis] = 1;
    let lane_shape = Shape(dims);
    let [n, c, h, w] = unravel(lane_shape, lane);
    n * strides[0] + c * strides[1] + h * strides[2] + w * strides[3]
}

/// Batched matrix multiply: `(B0,B1,M,K) x (B0,B1,K,N) -> (B0,B1,M,N)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() {
        return Err(Error::shape(0, format!("matmul batch mismatch {} vs {}", sa, sb)));
    }
    if sa.c() != sb.c() {
        return Err(Error::shape(1, format!("matmul batch mismatch {} vs {}", sa, sb)));
    }
    if sa.w() != sb.h() {
        return Err(Error::shape(3, format!("matmul inner-dim mismatch {} vs {}", sa, sb)));
    }
    let (batch, m, k, n) = (sa.n() * sa.c(), sa.h(), sa.w(), sb.w());
    let out_shape = Shape([sa.n(), sa.c(), m, n]);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let (ad, bd) = (a.data(), b.data());
        matmul_kernel(&ad, &bd, &mut data, batch, m, k, n, false, false);
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if a.requires_grad() || b.requires_grad() {
        out.with_requires_grad_internal()
    } else {
        out
    };
    screen_nonfinite("matmul", &out);
    if should_record::<T>(out.requires_grad()) {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        record::<T>("matmul", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            if a2.requires_grad() {
                // dA = g @ B^T
                let bd = b2.data();
                a2.with_grad_mut(|ga| {
                    matmul_kernel(g, &bd, ga, batch, m, n, k, false, true);
                });
            }
            if b2.requires_grad() {
                // dB = A^T @ g
                let ad = a2.data();
                b2.with_grad_mut(|gb| {
                    matmul_kernel(&ad, g, gb, batch, k, m, n, true, false);
                });
            }
        });
    }
    Ok(out)
}

/// `out += A(^T) @ B(^T)` per batch; A is (m x k) after transposition, B is
/// (k x n) after transposition.
#[allow(clippy::too_many_arguments)]
fn matmul_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    let (a_rows, a_cols) = if trans_a { (k, m) } else { (m, k) };
    let (b_rows, b_cols) = if trans_b { (n, k) } else { (k, n) };
    for bi in 0..batch {
        let ab = &a[bi * a_rows * a_cols..(bi + 1) * a_rows * a_cols];
        let bb = &b[bi * b_rows * b_cols..(bi + 1) * b_rows * b_cols];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let av = if trans_a { ab[p * a_cols + i] } else { ab[i * a_cols + p] };
                if av == T::zero() {
                    continue;
                }
                let orow = &mut ob[i * n..(i + 1) * n];
                if trans_b {
                    for j in 0..n {
                        orow[j] += av * bb[j * b_cols + p];
                    }
                } else {
                    let brow = &bb[p * b_cols..(p + 1) * b_cols];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
    }
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: Shape) -> Result<Tensor<T>> {
    if shape.numel() != x.shape().numel() {
        return Err(Error::shape(
            0,
            format!("reshape {} -> {} changes element count", x.shape(), shape),
        ));
    }
    let out = Tensor::from_vec(shape, x.to_vec())?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("reshape", move || {
            let guard = o2.grad_ref();
            if let Some(g) = guard.as_ref() {
                x2.accumulate_grad(g);
            }
        });
    }
    Ok(out)
}

/// Axis permutation; `perm[i]` names the source axis that lands on axis `i`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: [usize; 4]) -> Result<Tensor<T>> {
    let mut seen = [false; 4];
    for &p in &perm {
        if p > 3 || seen[p] {
            return Err(Error::config(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let src = x.shape();
    let out_shape = Shape([src.0[perm[0]], src.0[perm[1]], src.0[perm[2]], src.0[perm[3]]]);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let ss = src.broadcast_strides_full();
        let [on, oc, oh, ow] = out_shape.0;
        let mut i = 0;
        for n in 0..on {
            for c in 0..oc {
                for h in 0..oh {
                    for w in 0..ow {
                        let o = [n, c, h, w];
                        let mut si = 0;
                        for axis in 0..4 {
                            si += o[axis] * ss[perm[axis]];
                        }
                        data[i] = xd[si];
                        i += 1;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("permute", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let ss = x2.shape().broadcast_strides_full();
            let [on, oc, oh, ow] = o2.shape().0;
            x2.with_grad_mut(|gx| {
                let mut i = 0;
                for n in 0..on {
                    for c in 0..oc {
                        for h in 0..oh {
                            for w in 0..ow {
                                let o = [n, c, h, w];
                                let mut si = 0;
                                for axis in 0..4 {
                                    si += o[axis] * ss[perm[axis]];
                                }
                                gx[si] += g[i];
                                i += 1;
                            }
                        }
                    }
                }
            });
        });
    }
    Ok(out)
}

/// Concatenation along an arbitrary axis; all other axes must match.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if axis > 3 {
        return Err(Error::config(format!("concat axis {axis} out of range")));
    }
    if inputs.is_empty() {
        return Err(Error::contract("concat of zero tensors"));
    }
    let first = inputs[0].shape();
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        for a in 0..4 {
            if a != axis && s.0[a] != first.0[a] {
                return Err(Error::shape(a, format!("concat inputs {} vs {}", first, s)));
            }
        }
        total += s.0[axis];
    }
    let mut out_dims = first.0;
    out_dims[axis] = total;
    let out_shape = Shape(out_dims);

    // Copy per outer-block: axes before `axis` enumerate blocks; axes after
    // form the contiguous inner run.
    let outer: usize = first.0[..axis].iter().product();
    let inner: usize = first.0[axis + 1..].iter().product();
    let mut data = vec![T::zero(); out_shape.numel()];
    let out_axis_stride = total * inner;
    let mut offset = 0;
    for t in inputs {
        let len = t.shape().0[axis];
        let td = t.data();
        for o in 0..outer {
            let src = &td[o * len * inner..(o + 1) * len * inner];
            let dst_start = o * out_axis_stride + offset * inner;
            data[dst_start..dst_start + len * inner].copy_from_slice(src);
        }
        offset += len;
    }
    let requires = inputs.iter().any(|t| t.requires_grad());
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if requires { out.with_requires_grad_internal() } else { out };
    if should_record::<T>(requires) {
        let owned: Vec<Tensor<T>> = inputs.iter().map(|t| (*t).clone()).collect();
        let o2 = out.clone();
        record::<T>("concat", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let mut offset = 0;
            for t in &owned {
                let len = t.shape().0[axis];
                if t.requires_grad() {
                    t.with_grad_mut(|gt| {
                        for o in 0..outer {
                            let src_start = o * out_axis_stride + offset * inner;
                            let dst = &mut gt[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in
                                dst.iter_mut().zip(&g[src_start..src_start + len * inner])
                            {
                                *d += *s;
                            }
                        }
                    });
                }
                offset += len;
            }
        });
    }
    Ok(out)
}

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    concat(inputs, 1)
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn narrow<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    if axis > 3 {
        return Err(Error::config(format!("narrow axis {axis} out of range")));
    }
    let s = x.shape();
    if start + len > s.0[axis] || len == 0 {
        return Err(Error::shape(
            axis,
            format!("narrow [{start},{}) exceeds axis size {}", start + len, s.0[axis]),
        ));
    }
    let mut out_dims = s.0;
    out_dims[axis] = len;
    let out_shape = Shape(out_dims);
    let outer: usize = s.0[..axis].iter().product();
    let inner: usize = s.0[axis + 1..].iter().product();
    let src_axis = s.0[axis];
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        for o in 0..outer {
            let src_start = (o * src_axis + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[src_start..src_start + len * inner]);
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("narrow", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            x2.with_grad_mut(|gx| {
                for o in 0..outer {
                    let dst_start = (o * src_axis + start) * inner;
                    for i in 0..len * inner {
                        gx[dst_start + i] += g[o * len * inner + i];
                    }
                }
            });
        });
    }
    Ok(out)
}

/// Splits along the channel axis into chunks of the given sizes.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape().c() {
        return Err(Error::shape(
            1,
            format!("split sizes sum to {total}, tensor has {} channels", x.shape().c()),
        ));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &len in sizes {
        out.push(narrow(x, 1, start, len)?);
        start += len;
    }
    Ok(out)
}

/// Gathers whole slices along `axis` at the given indices (may repeat).
pub fn index_select<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    indices: &[usize],
) -> Result<Tensor<T>> {
    if axis > 3 {
        return Err(Error::config(format!("index_select axis {axis} out of range")));
    }
    let s = x.shape();
    if let Some(&bad) = indices.iter().find(|&&i| i >= s.0[axis]) {
        return Err(Error::shape(axis, format!("index {bad} out of range {}", s.0[axis])));
    }
    if indices.is_empty() {
        return Err(Error::contract("index_select with empty index list"));
    }
    let mut out_dims = s.0;
    out_dims[axis] = indices.len();
    let out_shape = Shape(out_dims);
    let outer: usize = s.0[..axis].iter().product();
    let inner: usize = s.0[axis + 1..].iter().product();
    let src_axis = s.0[axis];
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        for o in 0..outer {
            for (k, &ix) in indices.iter().enumerate() {
                let src_start = (o * src_axis + ix) * inner;
                let dst_start = (o * indices.len() + k) * inner;
                data[dst_start..dst_start + inner]
                    .copy_from_slice(&xd[src_start..src_start + inner]);
            }
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        let idx: Vec<usize> = indices.to_vec();
        record::<T>("index_select", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            x2.with_grad_mut(|gx| {
                for o in 0..outer {
                    for (k, &ix) in idx.iter().enumerate() {
                        let dst_start = (o * src_axis + ix) * inner;
                        let src_start = (o * idx.len() + k) * inner;
                        for i in 0..inner {
                            gx[dst_start + i] += g[src_start + i];
                        }
                    }
                }
            });
        });
    }
    Ok(out)
}

/// Sums over one axis, keeping it with size 1.
pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis > 3 {
        return Err(Error::config(format!("sum_axis axis {axis} out of range")));
    }
    let s = x.shape();
    let len = s.0[axis];
    let stride = s.broadcast_strides_full()[axis];
    let lanes = s.numel() / len;
    let mut out_dims = s.0;
    out_dims[axis] = 1;
    let out_shape = Shape(out_dims);
    let mut data = vec![T::zero(); lanes];
    {
        let xd = x.data();
        for lane in 0..lanes {
            let base = lane_base(s, axis, lane);
            let mut acc = T::zero();
            for k in 0..len {
                acc += xd[base + k * stride];
            }
            data[lane] = acc;
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("sum_axis", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let s = x2.shape();
            x2.with_grad_mut(|gx| {
                for lane in 0..lanes {
                    let base = lane_base(s, axis, lane);
                    for k in 0..len {
                        gx[base + k * stride] += g[lane];
                    }
                }
            });
        });
    }
    Ok(out)
}

/// Sum of all elements as a `(1,1,1,1)` tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut acc = T::zero();
    for &v in x.data().iter() {
        acc += v;
    }
    let out = Tensor::scalar(acc);
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("sum_all", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let gv = g[0];
            x2.with_grad_mut(|gx| {
                for v in gx.iter_mut() {
                    *v += gv;
                }
            });
        });
    }
    Ok(out)
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = T::fl(x.shape().numel() as f64);
    mul_scalar(&sum_all(x)?, T::one() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape(shape), data).unwrap()
    }

    fn p(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::param(Shape(shape), data).unwrap()
    }

    #[test]
    fn sigmoid_symmetry_and_relu_boundary() {
        let x = t([1, 1, 1, 3], vec![0.0, -1.0, 2.0]);
        let s = sigmoid(&x).unwrap();
        assert_eq!(s.data()[0], 0.5);
        let r = relu(&x).unwrap();
        assert_eq!(r.to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = t([1, 1, 1, 2], vec![0.0, 0.0]);
        let s = softmax(&x, 3).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t([2, 3, 2, 4], (0..48).map(|i| (i as f64) * 0.37 - 3.0).collect());
        for axis in 0..4 {
            let s = softmax(&x, axis).unwrap();
            let shape = s.shape();
            let len = shape.0[axis];
            let stride = shape.broadcast_strides_full()[axis];
            let lanes = shape.numel() / len;
            let sd = s.data();
            for lane in 0..lanes {
                let base = super::lane_base(shape, axis, lane);
                let sum: f64 = (0..len).map(|k| sd[base + k * stride]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn add_shape_error_names_axis() {
        let a = t([1, 2, 3, 4], vec![0.0; 24]);
        let b = t([1, 2, 5, 4], vec![0.0; 40]);
        match add(&a, &b).unwrap_err() {
            crate::error::Error::Shape { axis, .. } => assert_eq!(axis, 2),
            e => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn quadratic_form_gradient() {
        // loss = sum(x*x) => grad = 2x
        let tape = Tape::<f64>::new();
        let x = p([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]);
        let loss = sum_all(&mul(&x, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::<f64>::new();
        let x = p([1, 1, 1, 4], vec![0.0; 4]);
        let loss = sum_all(&sigmoid(&x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let x = p([1, 2, 2, 2], vec![1.0; 8]);
        let gate = p([1, 2, 1, 1], vec![3.0, 5.0]);
        let y = mul(&x, &gate).unwrap();
        assert_eq!(y.shape(), Shape([1, 2, 2, 2]));
        let loss = sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(gate.grad().unwrap(), vec![4.0, 4.0]);
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0, 3.0, 3.0, 5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn concat_then_split_roundtrips_bit_exact() {
        let a = t([2, 3, 2, 2], (0..24).map(|i| i as f64 * 0.1).collect());
        let b = t([2, 5, 2, 2], (0..40).map(|i| i as f64 * -0.3).collect());
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&cat, &[3, 5]).unwrap();
        assert_eq!(parts[0].to_vec(), a.to_vec());
        assert_eq!(parts[1].to_vec(), b.to_vec());
    }

    #[test]
    fn matmul_small_case() {
        let a = t([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t([1, 1, 3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t([2, 3, 4, 5], (0..120).map(|i| i as f64).collect());
        let y = permute(&x, [2, 0, 3, 1]).unwrap();
        assert_eq!(y.shape(), Shape([4, 2, 5, 3]));
        // inverse of [2,0,3,1] is [1,3,0,2]
        let z = permute(&y, [1, 3, 0, 2]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn index_select_gathers_and_scatters() {
        let tape = Tape::<f64>::new();
        let x = p([1, 1, 4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let y = index_select(&x, 2, &[3, 1, 1]).unwrap();
        assert_eq!(y.to_vec(), vec![6.0, 7.0, 2.0, 3.0, 2.0, 3.0]);
        let loss = sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
