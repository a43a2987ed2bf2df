//! Batch normalization.

use std::cell::RefCell;
use std::rc::Rc;

use super::scalar::Scalar;
use super::tape::{record, should_record};
use super::{screen_nonfinite, Shape, Tensor};
use crate::error::{Error, Result};

/// Execution mode threaded through every stateful module forward.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    /// Batch statistics; running stats updated only when `update_stats`.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
}

impl Mode {
    pub const TRAIN: Mode = Mode::Train { update_stats: true };
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Training mode normalizes with biased batch statistics and, when enabled,
/// updates running stats as `running = (1 - momentum) * running + momentum *
/// batch` (unbiased variance for the running update). Eval mode normalizes
/// with the running stats.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Rc<RefCell<Vec<T>>>,
    running_var: &Rc<RefCell<Vec<T>>>,
    momentum: T,
    eps: T,
    mode: Mode,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let c = xs.c();
    if gamma.shape() != Shape([1, c, 1, 1]) || beta.shape() != Shape([1, c, 1, 1]) {
        return Err(Error::shape(1, format!("batchnorm affine params must be (1,{c},1,1)")));
    }
    if running_mean.borrow().len() != c || running_var.borrow().len() != c {
        return Err(Error::shape(1, "running stats length mismatch".to_string()));
    }
    let m = xs.n() * xs.h() * xs.w();
    let m_t = T::fl(m as f64);

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train { .. } => {
            let xd = x.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for n in 0..xs.n() {
                for ch in 0..c {
                    let plane = xs.idx(n, ch, 0, 0);
                    let mut acc = T::zero();
                    for &v in &xd[plane..plane + xs.h() * xs.w()] {
                        acc += v;
                    }
                    mean[ch] += acc;
                }
            }
            for v in mean.iter_mut() {
                *v = *v / m_t;
            }
            for n in 0..xs.n() {
                for ch in 0..c {
                    let plane = xs.idx(n, ch, 0, 0);
                    let mu = mean[ch];
                    let mut acc = T::zero();
                    for &v in &xd[plane..plane + xs.h() * xs.w()] {
                        let d = v - mu;
                        acc += d * d;
                    }
                    var[ch] += acc;
                }
            }
            for v in var.iter_mut() {
                *v = *v / m_t;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.borrow().clone(), running_var.borrow().clone()),
    };

    if let Mode::Train { update_stats: true } = mode {
        let unbiased: Vec<T> = if m > 1 {
            var.iter().map(|&v| v * m_t / T::fl((m - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let mut rm = running_mean.borrow_mut();
        let mut rv = running_var.borrow_mut();
        for ch in 0..c {
            rm[ch] = (T::one() - momentum) * rm[ch] + momentum * mean[ch];
            rv[ch] = (T::one() - momentum) * rv[ch] + momentum * unbiased[ch];
        }
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let out_shape = xs;
    let mut data = vec![T::zero(); out_shape.numel()];
    let mut xhat = vec![T::zero(); out_shape.numel()];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for n in 0..xs.n() {
            for ch in 0..c {
                let plane = xs.idx(n, ch, 0, 0);
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in plane..plane + xs.h() * xs.w() {
                    let h = (xd[i] - mu) * is;
                    xhat[i] = h;
                    data[i] = ga * h + be;
                }
            }
        }
    }
    let requires = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let out = Tensor::from_vec(out_shape, data)?;
    let out = if requires { out.with_requires_grad_internal() } else { out };
    screen_nonfinite("batchnorm", &out);
    if should_record::<T>(requires) {
        let (x2, g2, b2, o2) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        let train = matches!(mode, Mode::Train { .. });
        record::<T>("batchnorm", move || {
            let guard = o2.grad_ref();
            let Some(g) = guard.as_ref() else { return };
            let xs = x2.shape();
            let c = xs.c();
            let gd = g2.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for n in 0..xs.n() {
                for ch in 0..c {
                    let plane = xs.idx(n, ch, 0, 0);
                    for i in plane..plane + xs.h() * xs.w() {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            if x2.requires_grad() {
                let mut gx = vec![T::zero(); xs.numel()];
                if train {
                    // dx = gamma*inv_std/M * (M*g - sum(g) - xhat*sum(g*xhat))
                    for ch in 0..c {
                        let scale = gd[ch] * inv_std[ch] / m_t;
                        for n in 0..xs.n() {
                            let plane = xs.idx(n, ch, 0, 0);
                            for i in plane..plane + xs.h() * xs.w() {
                                gx[i] = scale
                                    * (m_t * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                } else {
                    for ch in 0..c {
                        let k = gd[ch] * inv_std[ch];
                        for n in 0..xs.n() {
                            let plane = xs.idx(n, ch, 0, 0);
                            for i in plane..plane + xs.h() * xs.w() {
                                gx[i] = g[i] * k;
                            }
                        }
                    }
                }
                x2.accumulate_grad(&gx);
            }
            drop(gd);
            if g2.requires_grad() {
                g2.accumulate_grad(&dgamma);
            }
            if b2.requires_grad() {
                b2.accumulate_grad(&dbeta);
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_batch() {
        let x = Tensor::<f64>::from_vec(
            Shape([2, 1, 1, 2]),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let gamma = Tensor::full(Shape([1, 1, 1, 1]), 1.0);
        let beta = Tensor::zeros(Shape([1, 1, 1, 1]));
        let rm = Rc::new(RefCell::new(vec![0.0]));
        let rv = Rc::new(RefCell::new(vec![1.0]));
        let y = batchnorm(&x, &gamma, &beta, &rm, &rv, 0.03, 1e-3, Mode::TRAIN).unwrap();
        let yd = y.to_vec();
        let mean: f64 = yd.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // Running stats moved toward batch stats with momentum 0.03.
        assert!((rm.borrow()[0] - 0.03 * 2.5).abs() < 1e-12);
        let unbiased = (1.25_f64) * 4.0 / 3.0;
        assert!((rv.borrow()[0] - (0.97 + 0.03 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::from_vec(Shape([1, 1, 1, 2]), vec![3.0, 5.0]).unwrap();
        let gamma = Tensor::full(Shape([1, 1, 1, 1]), 2.0);
        let beta = Tensor::full(Shape([1, 1, 1, 1]), 1.0);
        let rm = Rc::new(RefCell::new(vec![3.0]));
        let rv = Rc::new(RefCell::new(vec![4.0]));
        let y = batchnorm(&x, &gamma, &beta, &rm, &rv, 0.03, 0.0, Mode::Eval).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - (2.0 * (2.0 / 2.0) + 1.0)).abs() < 1e-12);
    }
}
