//! Convolution kernels: grouped 2-D convolution and 1-D deformable
//! convolution along a single spatial axis.
//!
//! conv2d lowers each image to an im2row buffer (one row of `Cin/g*kh*kw`
//! taps per output pixel), so forward, weight-grad, and input-grad are plain
//! dot/axpy passes over contiguous slices.

use super::scalar::Scalar;
use super::tape::{record, should_record};
use super::{screen_nonfinite, Shape, Tensor};
use crate::error::{Error, Result};

/// Eight-lane dot product; both slices contiguous.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] = acc[l] + a[i + l] * b[i + l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += k * x` over contiguous slices.
#[inline]
pub(crate) fn axpy<T: Scalar>(k: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * *xi;
    }
}

/// `floor((dim + 2*pad - k) / stride) + 1`, as an error if non-positive.
fn out_dim(dim: usize, k: usize, pad: usize, stride: usize, axis: usize) -> Result<usize> {
    let padded = dim + 2 * pad;
    if padded < k {
        return Err(Error::shape(axis, format!("kernel {k} exceeds padded input {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeom {
    xs: Shape,
    os: Shape,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: (usize, usize),
    cin_g: usize,
    cout_g: usize,
    groups: usize,
    /// Taps per im2row row.
    k_len: usize,
}

/// Fills the im2row buffer for one (image, group): `os.h()*os.w()` rows of
/// `cin_g*kh*kw` taps, zero outside the input.
fn fill_rows<T: Scalar>(xd: &[T], rows: &mut [T], geom: &ConvGeom, n: usize, g: usize) {
    let ConvGeom { xs, os, kh, kw, stride, pad, cin_g, k_len, .. } = *geom;
    rows.fill(T::zero());
    for oy in 0..os.h() {
        for ox in 0..os.w() {
            let row = &mut rows[(oy * os.w() + ox) * k_len..(oy * os.w() + ox + 1) * k_len];
            let base_x = (ox * stride) as isize - pad.1 as isize;
            let kx_lo = (-base_x).max(0) as usize;
            let kx_hi = kw.min((xs.w() as isize - base_x).max(0) as usize);
            if kx_lo >= kx_hi {
                continue;
            }
            for ci in 0..cin_g {
                let plane = xs.idx(n, g * cin_g + ci, 0, 0);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= xs.h() as isize {
                        continue;
                    }
                    let src = plane + iy as usize * xs.w();
                    let dst = (ci * kh + ky) * kw;
                    let ix0 = (base_x + kx_lo as isize) as usize;
                    row[dst + kx_lo..dst + kx_hi]
                        .copy_from_slice(&xd[src + ix0..src + ix0 + (kx_hi - kx_lo)]);
                }
            }
        }
    }
}

/// Scatters im2row-layout gradients back onto the input.
fn scatter_rows<T: Scalar>(drows: &[T], gx: &mut [T], geom: &ConvGeom, n: usize, g: usize) {
    let ConvGeom { xs, os, kh, kw, stride, pad, cin_g, k_len, .. } = *geom;
    for oy in 0..os.h() {
        for ox in 0..os.w() {
            let row = &drows[(oy * os.w() + ox) * k_len..(oy * os.w() + ox + 1) * k_len];
            let base_x = (ox * stride) as isize - pad.1 as isize;
            let kx_lo = (-base_x).max(0) as usize;
            let kx_hi = kw.min((xs.w() as isize - base_x).max(0) as usize);
            if kx_lo >= kx_hi {
                continue;
            }
            for ci in 0..cin_g {
                let plane = xs.idx(n, g * cin_g + ci, 0, 0);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= xs.h() as isize {
                        continue;
                    }
                    let dst = plane + iy as usize * xs.w();
                    let src = (ci * kh + ky) * kw;
                    let ix0 = (base_x + kx_lo as isize) as usize;
                    for (o, v) in (ix0..).zip(&row[src + kx_lo..src + kx_hi]) {
                        gx[dst + o] += *v;
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution.
///
/// `w` has dims `(Cout, Cin/groups, kh, kw)`; `pad` is `(pad_h, pad_w)`.
/// Linear in both `x` and `w`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: (usize, usize),
    groups: usize,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if stride == 0 {
        return Err(Error::config("conv2d stride must be >= 1"));
    }
    if groups == 0 || xs.c() % groups != 0 {
        return Err(Error::shape(
            1,
            format!("input channels {} not divisible by groups {groups}", xs.c()),
        ));
    }
    let cin_g = xs.c() / groups;
    if ws.c() != cin_g {
        return Err(Error::shape(
            1,
            format!("weight expects {} in-channels per group, input provides {cin_g}", ws.c()),
        ));
    }
    if ws.n() % groups != 0 {
        return Err(Error::shape(
            0,
            format!("out channels {} not divisible by groups {groups}", ws.n()),
        ));
    }
    let (cout, kh, kw) = (ws.n(), ws.h(), ws.w());
    if let Some(bias) = b {
        let bs = bias.shape();
        if bs != Shape([1, cout, 1, 1]) {
            return Err(Error::shape(1, format!("bias {} must be (1,{cout},1,1)", bs)));
        }
    }
    let oh = out_dim(xs.h(), kh, pad.0, stride, 2)?;
    let ow = out_dim(xs.w(), kw, pad.1, stride, 3)?;
    let os = Shape([xs.n(), cout, oh, ow]);
    let cout_g = cout / groups;
    let geom = ConvGeom {
        xs,
        os,
        kh,
        kw,
        stride,
        pad,
        cin_g,
        cout_g,
        groups,
        k_len: cin_g * kh * kw,
    };

    let mut data = vec![T::zero(); os.numel()];
    {
        let xd = x.data();
        let wd = w.data();
        let mut rows = vec![T::zero(); oh * ow * geom.k_len];
        for n in 0..xs.n() {
            for g in 0..groups {
                fill_rows(&xd, &mut rows, &geom, n, g);
                for co_rel in 0..cout_g {
                    let co = g * cout_g + co_rel;
                    let wrow = &wd[co * geom.k_len..(co + 1) * geom.k_len];
                    let out_plane = os.idx(n, co, 0, 0);
                    for px in 0..oh * ow {
                        data[out_plane + px] =
                            dot(wrow, &rows[px * geom.k_len..(px + 1) * geom.k_len]);
                    }
                }
            }
        }
        if let Some(bias) = b {
            let bd = bias.data();
            for n in 0..xs.n() {
                for co in 0..cout {
                    let base = os.idx(n, co, 0, 0);
                    let bv = bd[co];
                    for v in &mut data[base..base + oh * ow] {
                        *v += bv;
                    }
                }
            }
        }
    }
    let requires =
        x.requires_grad() || w.requires_grad() || b.map(|t| t.requires_grad()).unwrap_or(false);
    let out = Tensor::from_vec(os, data)?;
    let out = if requires { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("conv2d", &out);
    if should_record::<T>(requires) {
        let (x2, w2, o2) = (x.clone(), w.clone(), out.clone());
        let b2 = b.cloned();
        record::<T>("conv2d", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let os = o2.shape();
            let xs = x2.shape();
            let (oh, ow) = (os.h(), os.w());
            if let Some(bias) = &b2 {
                if bias.requires_grad() {
                    let mut gb = vec![T::zero(); cout];
                    for n in 0..os.n() {
                        for co in 0..cout {
                            let base = os.idx(n, co, 0, 0);
                            let mut acc = T::zero();
                            for &v in &g[base..base + oh * ow] {
                                acc += v;
                            }
                            gb[co] += acc;
                        }
                    }
                    bias.accumulate_grad(&gb);
                }
            }
            let xd = x2.data();
            let wd = w2.data();
            let need_w = w2.requires_grad();
            let need_x = x2.requires_grad();
            let mut gw = if need_w { vec![T::zero(); w2.shape().numel()] } else { Vec::new() };
            let mut gx = if need_x { vec![T::zero(); xs.numel()] } else { Vec::new() };
            let mut rows = vec![T::zero(); oh * ow * geom.k_len];
            let mut drows = vec![T::zero(); oh * ow * geom.k_len];
            for n in 0..xs.n() {
                for gi in 0..geom.groups {
                    if need_w {
                        fill_rows(&xd, &mut rows, &geom, n, gi);
                    }
                    if need_x {
                        drows.fill(T::zero());
                    }
                    for co_rel in 0..geom.cout_g {
                        let co = gi * geom.cout_g + co_rel;
                        let out_plane = os.idx(n, co, 0, 0);
                        let wrow = &wd[co * geom.k_len..(co + 1) * geom.k_len];
                        for px in 0..oh * ow {
                            let gv = g[out_plane + px];
                            if gv == T::zero() {
                                continue;
                            }
                            if need_w {
                                axpy(
                                    gv,
                                    &rows[px * geom.k_len..(px + 1) * geom.k_len],
                                    &mut gw[co * geom.k_len..(co + 1) * geom.k_len],
                                );
                            }
                            if need_x {
                                axpy(
                                    gv,
                                    wrow,
                                    &mut drows[px * geom.k_len..(px + 1) * geom.k_len],
                                );
                            }
                        }
                    }
                    if need_x {
                        scatter_rows(&drows, &mut gx, &geom, n, gi);
                    }
                }
            }
            drop(xd);
            drop(wd);
            if need_w {
                w2.accumulate_grad(&gw);
            }
            if need_x {
                x2.accumulate_grad(&gx);
            }
        });
    }
    Ok(out)
}

/// Axis a directional deformable convolution slides and samples along.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DeformAxis {
    /// 1 x k kernel, taps displaced along the width axis.
    Row,
    /// k x 1 kernel, taps displaced along the height axis.
    Column,
}

/// 1-D deformable convolution along one spatial axis.
///
/// `w` has dims `(Cout, Cin, 1, k)` for rows or `(Cout, Cin, k, 1)` for
/// columns; stride is 1 and padding `k/2` along the axis, so output dims
/// equal input dims. `offsets` has dims `(N, k, H, W)`: one scalar per kernel
/// tap displacing that tap's sampling coordinate along the chosen axis.
/// Fractional coordinates resolve by linear interpolation along the axis;
/// out-of-bounds samples read 0.
pub fn deform_conv1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    axis: DeformAxis,
) -> Result<Tensor<T>> {
    let (xs, ws, os_) = (x.shape(), w.shape(), offsets.shape());
    let k = match axis {
        DeformAxis::Row => {
            if ws.h() != 1 {
                return Err(Error::config(format!("row kernel must be 1 x k, got {}", ws)));
            }
            ws.w()
        }
        DeformAxis::Column => {
            if ws.w() != 1 {
                return Err(Error::config(format!("column kernel must be k x 1, got {}", ws)));
            }
            ws.h()
        }
    };
    if k % 2 == 0 {
        return Err(Error::config(format!("deformable kernel size {k} must be odd")));
    }
    if ws.c() != xs.c() {
        return Err(Error::shape(
            1,
            format!("weight expects {} in-channels, input has {}", ws.c(), xs.c()),
        ));
    }
    if os_ != Shape([xs.n(), k, xs.h(), xs.w()]) {
        return Err(Error::shape(
            1,
            format!("offsets {} must be ({},{k},{},{})", os_, xs.n(), xs.h(), xs.w()),
        ));
    }
    let cout = ws.n();
    if let Some(bias) = b {
        if bias.shape() != Shape([1, cout, 1, 1]) {
            return Err(Error::shape(1, format!("bias {} must be (1,{cout},1,1)", bias.shape())));
        }
    }
    let out_shape = Shape([xs.n(), cout, xs.h(), xs.w()]);
    let pad = (k / 2) as isize;
    let cin = xs.c();

    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let wd = w.data();
        let od = offsets.data();
        let mut samples = vec![T::zero(); cin * k];
        for n in 0..xs.n() {
            for y in 0..xs.h() {
                for xo in 0..xs.w() {
                    gather_samples(&xd, &od, &mut samples, None, xs, os_, n, y, xo, k, pad, axis);
                    let hw = xs.h() * xs.w();
                    let out_base = ((n * cout) * xs.h() + y) * xs.w() + xo;
                    for co in 0..cout {
                        data[out_base + co * hw] =
                            dot(&wd[co * cin * k..(co + 1) * cin * k], &samples);
                    }
                }
            }
        }
        if let Some(bias) = b {
            let bd = bias.data();
            for n in 0..xs.n() {
                for co in 0..cout {
                    let base = out_shape.idx(n, co, 0, 0);
                    let bv = bd[co];
                    for v in &mut data[base..base + xs.h() * xs.w()] {
                        *v += bv;
                    }
                }
            }
        }
    }
    let requires = x.requires_grad()
        || w.requires_grad()
        || offsets.requires_grad()
        || b.map(|t| t.requires_grad()).unwrap_or(false);
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if requires { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("deform_conv1d", &out);
    if should_record::<T>(requires) {
        let (x2, w2, off2, o2) = (x.clone(), w.clone(), offsets.clone(), out.clone());
        let b2 = b.cloned();
        record::<T>("deform_conv1d", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let xs = x2.shape();
            let ws = w2.shape();
            let os_ = off2.shape();
            let oshape = o2.shape();
            let cout = ws.n();
            if let Some(bias) = &b2 {
                if bias.requires_grad() {
                    let mut gb = vec![T::zero(); cout];
                    for n in 0..xs.n() {
                        for co in 0..cout {
                            let base = oshape.idx(n, co, 0, 0);
                            let mut acc = T::zero();
                            for &v in &g[base..base + xs.h() * xs.w()] {
                                acc += v;
                            }
                            gb[co] += acc;
                        }
                    }
                    bias.accumulate_grad(&gb);
                }
            }
            let xd = x2.data();
            let wd = w2.data();
            let od = off2.data();
            let need_w = w2.requires_grad();
            let need_x = x2.requires_grad();
            let need_off = off2.requires_grad();
            let mut gw = vec![T::zero(); ws.numel()];
            let mut gx = vec![T::zero(); xs.numel()];
            let mut goff = vec![T::zero(); os_.numel()];
            let mut samples = vec![T::zero(); cin * k];
            let mut slopes = vec![T::zero(); cin * k];
            let mut dsamples = vec![T::zero(); cin * k];
            let hw = xs.h() * xs.w();
            for n in 0..xs.n() {
                for y in 0..xs.h() {
                    for xo in 0..xs.w() {
                        gather_samples(
                            &xd,
                            &od,
                            &mut samples,
                            Some(&mut slopes),
                            xs,
                            os_,
                            n,
                            y,
                            xo,
                            k,
                            pad,
                            axis,
                        );
                        dsamples.fill(T::zero());
                        let out_base = ((n * cout) * xs.h() + y) * xs.w() + xo;
                        for co in 0..cout {
                            let gv = g[out_base + co * hw];
                            if gv == T::zero() {
                                continue;
                            }
                            if need_w {
                                axpy(gv, &samples, &mut gw[co * cin * k..(co + 1) * cin * k]);
                            }
                            axpy(gv, &wd[co * cin * k..(co + 1) * cin * k], &mut dsamples);
                        }
                        for j in 0..k {
                            if need_off {
                                let mut acc = T::zero();
                                for ci in 0..cin {
                                    acc += dsamples[ci * k + j] * slopes[ci * k + j];
                                }
                                goff[os_.idx(n, j, y, xo)] += acc;
                            }
                            if need_x {
                                scatter_tap(
                                    &od, &mut gx, &dsamples, xs, os_, n, y, xo, j, k, pad, axis,
                                );
                            }
                        }
                    }
                }
            }
            drop(xd);
            drop(wd);
            drop(od);
            if need_w {
                w2.accumulate_grad(&gw);
            }
            if need_x {
                x2.accumulate_grad(&gx);
            }
            if need_off {
                off2.accumulate_grad(&goff);
            }
        });
    }
    Ok(out)
}

/// Sampling geometry of tap `j` at output position `(y, xo)`: floor index and
/// fraction along the deform axis.
#[inline(always)]
fn tap_position<T: Scalar>(
    od: &[T],
    os_: Shape,
    n: usize,
    y: usize,
    xo: usize,
    j: usize,
    pad: isize,
    axis: DeformAxis,
) -> (isize, T) {
    let off = od[os_.idx(n, j, y, xo)];
    let base = match axis {
        DeformAxis::Row => xo as isize,
        DeformAxis::Column => y as isize,
    };
    let p = T::fl((base - pad + j as isize) as f64) + off;
    let l = p.f64().floor() as isize;
    (l, p - T::fl(l as f64))
}

/// Gathers the `(cin, k)` interpolated samples at one output position;
/// optionally also the interpolation slopes (for offset gradients).
#[allow(clippy::too_many_arguments)]
#[inline]
fn gather_samples<T: Scalar>(
    xd: &[T],
    od: &[T],
    samples: &mut [T],
    mut slopes: Option<&mut [T]>,
    xs: Shape,
    os_: Shape,
    n: usize,
    y: usize,
    xo: usize,
    k: usize,
    pad: isize,
    axis: DeformAxis,
) {
    let cin = xs.c();
    let limit = match axis {
        DeformAxis::Row => xs.w() as isize,
        DeformAxis::Column => xs.h() as isize,
    };
    let plane_stride = xs.h() * xs.w();
    for j in 0..k {
        let (l, frac) = tap_position(od, os_, n, y, xo, j, pad, axis);
        let fetch_base = |pos: isize| -> Option<usize> {
            if pos < 0 || pos >= limit {
                None
            } else {
                Some(match axis {
                    DeformAxis::Row => xs.idx(n, 0, y, pos as usize),
                    DeformAxis::Column => xs.idx(n, 0, pos as usize, xo),
                })
            }
        };
        let lo = fetch_base(l);
        let hi = fetch_base(l + 1);
        for ci in 0..cin {
            let lo_v = lo.map(|b| xd[b + ci * plane_stride]).unwrap_or_else(T::zero);
            let hi_v = hi.map(|b| xd[b + ci * plane_stride]).unwrap_or_else(T::zero);
            samples[ci * k + j] = (T::one() - frac) * lo_v + frac * hi_v;
            if let Some(s) = slopes.as_deref_mut() {
                s[ci * k + j] = hi_v - lo_v;
            }
        }
    }
}

/// Scatters one tap's sample gradients onto the two integer neighbours.
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_tap<T: Scalar>(
    od: &[T],
    gx: &mut [T],
    dsamples: &[T],
    xs: Shape,
    os_: Shape,
    n: usize,
    y: usize,
    xo: usize,
    j: usize,
    k: usize,
    pad: isize,
    axis: DeformAxis,
) {
    let cin = xs.c();
    let limit = match axis {
        DeformAxis::Row => xs.w() as isize,
        DeformAxis::Column => xs.h() as isize,
    };
    let plane_stride = xs.h() * xs.w();
    let (l, frac) = tap_position(od, os_, n, y, xo, j, pad, axis);
    let base = |pos: isize| -> Option<usize> {
        if pos < 0 || pos >= limit {
            None
        } else {
            Some(match axis {
                DeformAxis::Row => xs.idx(n, 0, y, pos as usize),
                DeformAxis::Column => xs.idx(n, 0, pos as usize, xo),
            })
        }
    };
    let lo = base(l);
    let hi = base(l + 1);
    for ci in 0..cin {
        let ds = dsamples[ci * k + j];
        if ds == T::zero() {
            continue;
        }
        if let Some(b) = lo {
            gx[b + ci * plane_stride] += ds * (T::one() - frac);
        }
        if let Some(b) = hi {
            gx[b + ci * plane_stride] += ds * frac;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape(shape), data).unwrap()
    }

    #[test]
    fn identity_kernel_passthrough() {
        let x = t([1, 1, 3, 3], (0..9).map(|i| i as f64).collect());
        let w = t([1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, 1, (0, 0), 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn box_kernel_on_constant_map() {
        // 3x3 all-ones kernel, pad 1, constant-1 5x5: interior 9, corners 4.
        let x = t([1, 1, 5, 5], vec![1.0; 25]);
        let w = t([1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &w, None, 1, (1, 1), 1).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 4), 4.0);
        assert_eq!(y.at(0, 0, 4, 4), 4.0);
        assert_eq!(y.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn strided_shape_formula() {
        let x = t([2, 8, 16, 16], vec![0.0; 2 * 8 * 16 * 16]);
        let w = t([4, 8, 3, 3], vec![0.0; 4 * 8 * 9]);
        let y = conv2d(&x, &w, None, 2, (1, 1), 1).unwrap();
        assert_eq!(y.shape(), Shape([2, 4, 8, 8]));
    }

    #[test]
    fn group_mismatch_errors() {
        let x = t([1, 6, 4, 4], vec![0.0; 96]);
        let w = t([4, 2, 3, 3], vec![0.0; 72]);
        assert!(conv2d(&x, &w, None, 1, (1, 1), 4).is_err());
    }

    #[test]
    fn depthwise_groups() {
        let x = t([1, 3, 4, 4], (0..48).map(|i| i as f64 * 0.25).collect());
        let w = t([3, 1, 3, 3], (0..27).map(|i| (i as f64 * 0.31).sin()).collect());
        let y = conv2d(&x, &w, None, 1, (1, 1), 3).unwrap();
        assert_eq!(y.shape(), Shape([1, 3, 4, 4]));
        // Channel 1 output depends only on channel 1 input.
        let mut x2_data = x.to_vec();
        for v in &mut x2_data[0..16] {
            *v += 100.0;
        }
        let x2 = t([1, 3, 4, 4], x2_data);
        let y2 = conv2d(&x2, &w, None, 1, (1, 1), 3).unwrap();
        for i in 16..48 {
            assert_eq!(y.data()[i], y2.data()[i]);
        }
    }

    #[test]
    fn zero_offsets_reduce_to_standard_conv() {
        let x = t([1, 2, 4, 6], (0..48).map(|i| (i as f64 * 0.37).sin()).collect());
        let w = t([2, 2, 1, 3], (0..12).map(|i| (i as f64 * 0.11).cos()).collect());
        let off = Tensor::zeros(Shape([1, 3, 4, 6]));
        let deform = deform_conv1d(&x, &w, None, &off, DeformAxis::Row).unwrap();
        let plain = conv2d(&x, &w, None, 1, (0, 1), 1).unwrap();
        for (a, b) in deform.data().iter().zip(plain.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_offset_shifts_ramp() {
        // Constant offset +1 over a ramp: interior outputs equal the
        // zero-offset output shifted one pixel along the row axis.
        let width = 8;
        let ramp: Vec<f64> = (0..width).map(|i| i as f64).collect();
        let x = t([1, 1, 1, width], ramp);
        let w = t([1, 1, 1, 3], vec![0.25, 0.5, 0.25]);
        let zeros = Tensor::zeros(Shape([1, 3, 1, width]));
        let ones = Tensor::full(Shape([1, 3, 1, width]), 1.0);
        let base = deform_conv1d(&x, &w, None, &zeros, DeformAxis::Row).unwrap();
        let shifted = deform_conv1d(&x, &w, None, &ones, DeformAxis::Row).unwrap();
        for i in 1..width - 2 {
            assert!(
                (shifted.at(0, 0, 0, i) - base.at(0, 0, 0, i + 1)).abs() < 1e-12,
                "mismatch at {i}"
            );
        }
    }

    #[test]
    fn fractional_offset_interpolates() {
        // k=1, weight 1, offset +0.5 over [0,1,2,3]: samples 0.5, 1.5, 2.5,
        // then 1.5 at the right edge (half-weight on the zero boundary).
        let x = t([1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]);
        let w = t([1, 1, 1, 1], vec![1.0]);
        let off = Tensor::full(Shape([1, 1, 1, 4]), 0.5);
        let y = deform_conv1d(&x, &w, None, &off, DeformAxis::Row).unwrap();
        let expect = [0.5, 1.5, 2.5, 1.5];
        for (i, e) in expect.iter().enumerate() {
            assert!((y.at(0, 0, 0, i) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let x = t([1, 1, 2, 4], vec![0.0; 8]);
        let w = t([1, 1, 1, 4], vec![0.0; 4]);
        let off = Tensor::zeros(Shape([1, 4, 2, 4]));
        assert!(matches!(
            deform_conv1d(&x, &w, None, &off, DeformAxis::Row),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn conv_linearity() {
        use crate::tensor::ops::{add, mul_scalar};
        let mut rng = 1234u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = t([1, 2, 5, 5], (0..50).map(|_| next()).collect());
        let y = t([1, 2, 5, 5], (0..50).map(|_| next()).collect());
        let w = t([3, 2, 3, 3], (0..54).map(|_| next()).collect());
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d(
            &add(&mul_scalar(&x, a).unwrap(), &mul_scalar(&y, b).unwrap()).unwrap(),
            &w,
            None,
            1,
            (1, 1),
            1,
        )
        .unwrap();
        let rhs = add(
            &mul_scalar(&conv2d(&x, &w, None, 1, (1, 1), 1).unwrap(), a).unwrap(),
            &mul_scalar(&conv2d(&y, &w, None, 1, (1, 1), 1).unwrap(), b).unwrap(),
        )
        .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data().iter()) {
            let rel = (l - r).abs() / (l.abs().max(r.abs()) + 1e-12);
            assert!(rel < 1e-10);
        }
    }
}
