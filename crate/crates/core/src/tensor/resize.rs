//! Spatial resampling: bilinear interpolation and adaptive average pooling.

use super::scalar::Scalar;
use super::tape::{record, should_record};
use super::{screen_nonfinite, Shape, Tensor};
use crate::error::{Error, Result};

/// Source coordinate and interpolation weights for one output index under the
/// half-pixel-center (align-corners = false) convention.
#[inline(always)]
fn bilinear_axis(out_i: usize, scale: f64, in_dim: usize) -> (usize, usize, f64) {
    let mut src = (out_i as f64 + 0.5) * scale - 0.5;
    if src < 0.0 {
        src = 0.0;
    }
    let lo = (src.floor() as usize).min(in_dim - 1);
    let hi = (lo + 1).min(in_dim - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize to `(out_h, out_w)`, align-corners = false.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target dims must be >= 1"));
    }
    let xs = x.shape();
    if out_h == xs.h() && out_w == xs.w() {
        // No-op resize: keep the tape clean by an identity copy.
        return super::ops::mul_scalar(x, T::one());
    }
    let out_shape = Shape([xs.n(), xs.c(), out_h, out_w]);
    let scale_h = xs.h() as f64 / out_h as f64;
    let scale_w = xs.w() as f64 / out_w as f64;
    let rows: Vec<(usize, usize, f64)> =
        (0..out_h).map(|i| bilinear_axis(i, scale_h, xs.h())).collect();
    let cols: Vec<(usize, usize, f64)> =
        (0..out_w).map(|i| bilinear_axis(i, scale_w, xs.w())).collect();

    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let mut i = 0;
        for n in 0..xs.n() {
            for c in 0..xs.c() {
                let plane = xs.idx(n, c, 0, 0);
                for &(y0, y1, fy) in &rows {
                    let r0 = plane + y0 * xs.w();
                    let r1 = plane + y1 * xs.w();
                    let (fy, gy) = (T::fl(fy), T::fl(1.0 - fy));
                    for &(x0, x1, fx) in &cols {
                        let (fx_t, gx_t) = (T::fl(fx), T::fl(1.0 - fx));
                        data[i] = gy * (gx_t * xd[r0 + x0] + fx_t * xd[r0 + x1])
                            + fy * (gx_t * xd[r1 + x0] + fx_t * xd[r1 + x1]);
                        i += 1;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("resize_bilinear", &out);
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("resize_bilinear", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let xs = x2.shape();
            let mut gx = vec![T::zero(); xs.numel()];
            let mut i = 0;
            for n in 0..xs.n() {
                for c in 0..xs.c() {
                    let plane = xs.idx(n, c, 0, 0);
                    for &(y0, y1, fy) in &rows {
                        let r0 = plane + y0 * xs.w();
                        let r1 = plane + y1 * xs.w();
                        let (fy, gy) = (T::fl(fy), T::fl(1.0 - fy));
                        for &(x0, x1, fx) in &cols {
                            let (fx_t, gx_t) = (T::fl(fx), T::fl(1.0 - fx));
                            let gv = g[i];
                            gx[r0 + x0] += gv * gy * gx_t;
                            gx[r0 + x1] += gv * gy * fx_t;
                            gx[r1 + x0] += gv * fy * gx_t;
                            gx[r1 + x1] += gv * fy * fx_t;
                            i += 1;
                        }
                    }
                }
            }
            x2.accumulate_grad(&gx);
        });
    }
    Ok(out)
}

/// Adaptive average pooling to `(out_h, out_w)`; each output cell is the mean
/// of its evenly partitioned input window.
pub fn adaptive_avg_pool<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("pool target dims must be >= 1"));
    }
    if out_h > xs.h() {
        return Err(Error::shape(2, format!("pool target {out_h} exceeds input {}", xs.h())));
    }
    if out_w > xs.w() {
        return Err(Error::shape(3, format!("pool target {out_w} exceeds input {}", xs.w())));
    }
    let window = |i: usize, out: usize, dim: usize| -> (usize, usize) {
        (i * dim / out, ((i + 1) * dim).div_ceil(out))
    };
    let rows: Vec<(usize, usize)> = (0..out_h).map(|i| window(i, out_h, xs.h())).collect();
    let cols: Vec<(usize, usize)> = (0..out_w).map(|i| window(i, out_w, xs.w())).collect();
    let out_shape = Shape([xs.n(), xs.c(), out_h, out_w]);
    let mut data = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let mut i = 0;
        for n in 0..xs.n() {
            for c in 0..xs.c() {
                let plane = xs.idx(n, c, 0, 0);
                for &(y0, y1) in &rows {
                    for &(x0, x1) in &cols {
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let row = plane + y * xs.w();
                            for xi in x0..x1 {
                                acc += xd[row + xi];
                            }
                        }
                        data[i] = acc / T::fl(((y1 - y0) * (x1 - x0)) as f64);
                        i += 1;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if x.requires_grad() { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("adaptive_avg_pool", &out);
    if should_record::<T>(out.requires_grad()) {
        let (x2, o2) = (x.clone(), out.clone());
        record::<T>("adaptive_avg_pool", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let xs = x2.shape();
            let mut gx = vec![T::zero(); xs.numel()];
            let mut i = 0;
            for n in 0..xs.n() {
                for c in 0..xs.c() {
                    let plane = xs.idx(n, c, 0, 0);
                    for &(y0, y1) in &rows {
                        for &(x0, x1) in &cols {
                            let share = g[i] / T::fl(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                let row = plane + y * xs.w();
                                for xi in x0..x1 {
                                    gx[row + xi] += share;
                                }
                            }
                            i += 1;
                        }
                    }
                }
            }
            x2.accumulate_grad(&gx);
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape(shape), data).unwrap()
    }

    #[test]
    fn upscale_preserves_constant() {
        let x = Tensor::<f64>::full(Shape([1, 1, 4, 4]), 5.0);
        let y = resize_bilinear(&x, 8, 8).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn downscale_to_single_pixel_averages_corners() {
        let x = t([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = resize_bilinear(&x, 1, 1).unwrap();
        assert!((y.scalar_value() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let x = t([1, 2, 3, 3], (0..18).map(|i| i as f64 * 0.7).collect());
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn pool_constant_preserved() {
        let x = Tensor::<f64>::full(Shape([1, 1, 4, 4]), 3.0);
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn global_pool_is_mean() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = adaptive_avg_pool(&x, 1, 1).unwrap();
        assert!((y.scalar_value() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn row_pool_of_row_constant_map() {
        // Rows constant c_h pool to the column vector of c_h.
        let mut data = Vec::new();
        for h in 0..4 {
            for _ in 0..6 {
                data.push(h as f64 * 1.5 - 2.0);
            }
        }
        let x = t([1, 1, 4, 6], data);
        let y = adaptive_avg_pool(&x, 4, 1).unwrap();
        for h in 0..4 {
            assert!((y.at(0, 0, h, 0) - (h as f64 * 1.5 - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_larger_than_input_rejected() {
        let x = Tensor::<f64>::zeros(Shape([1, 1, 2, 2]));
        assert!(adaptive_avg_pool(&x, 3, 1).is_err());
    }
}
