//! Finite-difference gradient verification.
//!
//! Runs in `f64` only: the closure is evaluated once under a tape to collect
//! analytic gradients, then re-evaluated twice per coordinate with a central
//! difference. The numeric path never touches the tape, so it is independent
//! of the backward implementation it checks.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Central-difference check of `f` against its tape gradients.
///
/// `f` must reduce to a scalar `(1,1,1,1)` tensor and re-read `inputs` on
/// every call; all `inputs` must be leaves with `requires_grad`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, rel_tol: f64) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    grad_check_scaled(f, inputs, h, rel_tol, 1.0)
}

/// Like [`grad_check`] with the analytic gradient scaled by `analytic_scale`
/// before comparison. A scale of 1.01 is the negative control: it must fail
/// for any op with a nonzero gradient.
pub fn grad_check_scaled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    rel_tol: f64,
    analytic_scale: f64,
) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            return Err(Error::GradCheck(format!("input {i} does not require grad")));
        }
        t.zero_grad();
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::<f64>::new();
        let loss = f()?;
        if loss.shape().numel() != 1 {
            return Err(Error::GradCheck("closure must reduce to a scalar".into()));
        }
        tape.backward(&loss)?;
        inputs
            .iter()
            .map(|t| t.take_grad().unwrap_or_else(|| vec![0.0; t.shape().numel()]))
            .collect()
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coords = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        let numel = t.shape().numel();
        for ci in 0..numel {
            let orig = t.data()[ci];
            t.update_data(|d| d[ci] = orig + h);
            let up = f()?.scalar_value();
            t.update_data(|d| d[ci] = orig - h);
            let down = f()?.scalar_value();
            t.update_data(|d| d[ci] = orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][ci] * analytic_scale;
            if !a.is_finite() {
                return Err(Error::GradCheck(format!(
                    "non-finite analytic gradient at input {ti}, coordinate {ci}"
                )));
            }
            if !numeric.is_finite() {
                return Err(Error::GradCheck(format!(
                    "non-finite numeric gradient at input {ti}, coordinate {ci}"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-12);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((ti, ci));
            }
            coords += 1;
        }
    }
    Ok(GradReport { max_rel_err, pass: max_rel_err <= rel_tol, worst, coords_checked: coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, ops, Shape};

    #[test]
    fn sigmoid_sum_at_zero() {
        let x = Tensor::<f64>::param(Shape([1, 1, 1, 3]), vec![0.0; 3]).unwrap();
        let x2 = x.clone();
        let report = grad_check(
            move || ops::sum_all(&ops::sigmoid(&x2)?),
            &[x.clone()],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // sigma'(0) = 1/4, checked against the analytic value directly.
        let tape = Tape::<f64>::new();
        let loss = ops::sum_all(&ops::sigmoid(&x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut seed = 42u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = Tensor::<f64>::param(Shape([1, 2, 5, 5]), (0..50).map(|_| next()).collect())
            .unwrap();
        let w = Tensor::<f64>::param(Shape([3, 2, 3, 3]), (0..54).map(|_| next()).collect())
            .unwrap();
        let b = Tensor::<f64>::param(Shape([1, 3, 1, 1]), (0..3).map(|_| next()).collect())
            .unwrap();
        let (x2, w2, b2) = (x.clone(), w.clone(), b.clone());
        let report = grad_check(
            move || ops::sum_all(&ops::mul(&conv2d(&x2, &w2, Some(&b2), 2, (1, 1), 1)?, &conv2d(&x2, &w2, Some(&b2), 2, (1, 1), 1)?)?),
            &[x, w, b],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn negative_control_detects_injected_error() {
        let x = Tensor::<f64>::param(Shape([1, 1, 1, 4]), vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let x2 = x.clone();
        let f = move || ops::sum_all(&ops::mul(&x2, &x2)?);
        let ok = grad_check_scaled(&f, &[x.clone()], 1e-4, 1e-4, 1.0).unwrap();
        assert!(ok.pass);
        let bad = grad_check_scaled(&f, &[x], 1e-4, 1e-4, 1.01).unwrap();
        assert!(!bad.pass);
    }
}
