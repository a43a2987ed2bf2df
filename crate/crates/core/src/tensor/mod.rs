//! Dense rank-4 tensors with reverse-mode automatic differentiation.
//!
//! Everything in the model is a `(N, C, H, W)` tensor. Primitives are pure
//! functions of their inputs; tensors are immutable after construction except
//! for two sanctioned mutation sites: gradient buffers (filled during
//! `Tape::backward`) and leaf-parameter data (updated by the optimizer and
//! the checkpoint loader between recording sessions).

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod resize;
mod scalar;
pub(crate) mod tape;

pub use conv::{conv2d, deform_conv1d, DeformAxis};
pub use gradcheck::{grad_check, grad_check_scaled, GradReport};
pub use norm::{batchnorm, Mode};
pub use ops::*;
pub use resize::{adaptive_avg_pool, resize_bilinear};
pub use scalar::Scalar;
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Tensor dimensions `(N, C, H, W)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    #[inline(always)]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline(always)]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline(always)]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline(always)]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    #[inline(always)]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major offset of element `(n, c, h, w)`.
    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }

    /// Row-major strides, with stride 0 on axes of size 1 so the shape can be
    /// broadcast against a larger one.
    #[inline]
    pub(crate) fn broadcast_strides(&self) -> [usize; 4] {
        let s3 = 1;
        let s2 = self.0[3];
        let s1 = self.0[2] * s2;
        let s0 = self.0[1] * s1;
        let mut s = [s0, s1, s2, s3];
        for a in 0..4 {
            if self.0[a] == 1 {
                s[a] = 0;
            }
        }
        s
    }

    fn validate(&self) -> Result<()> {
        for (axis, &d) in self.0.iter().enumerate() {
            if d == 0 {
                return Err(Error::shape(axis, "every dim must be >= 1"));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

struct Inner<T: Scalar> {
    shape: Shape,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// Dense rank-4 tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor<T: Scalar>(Rc<Inner<T>>);

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if shape.numel() != data.len() {
            return Err(Error::shape(
                0,
                format!("dims {} imply {} values, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad: false,
            grad: RefCell::new(None),
        })))
    }

    /// Leaf parameter: participates in gradient accumulation.
    pub fn param(shape: Shape, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::from_vec(shape, vec![T::zero(); shape.numel()]).expect("valid shape")
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor::from_vec(shape, vec![value; shape.numel()]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape([1, 1, 1, 1]), value)
    }

    fn with_requires_grad(self, flag: bool) -> Self {
        // Only valid on freshly built leaves (no aliasing yet).
        let inner = Rc::try_unwrap(self.0).ok().expect("unshared tensor");
        Tensor(Rc::new(Inner { requires_grad: flag, ..inner }))
    }

    /// New tensor sharing nothing with `self`, gradients disabled.
    pub fn detach(&self) -> Self {
        Tensor::from_vec(self.shape(), self.data().clone()).expect("same shape")
    }

    #[inline(always)]
    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    #[inline(always)]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data()[self.shape().idx(n, c, h, w)]
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> T {
        assert_eq!(self.shape().numel(), 1, "scalar_value on non-scalar tensor");
        self.data()[0]
    }

    /// Overwrites leaf data in place. Must not be called while a tape holds
    /// recorded ops over this tensor.
    pub fn copy_from(&self, values: &[T]) {
        let mut data = self.0.data.borrow_mut();
        assert_eq!(data.len(), values.len(), "copy_from length mismatch");
        data.copy_from_slice(values);
    }

    /// Applies `f` to the raw data in place (optimizer step on leaves).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Borrowed view of the gradient buffer; backward kernels read the
    /// upstream gradient through this without cloning.
    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, values: &[T]) {
        debug_assert_eq!(values.len(), self.shape().numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, vi) in g.iter_mut().zip(values) {
                    *gi += *vi;
                }
            }
            None => *slot = Some(values.to_vec()),
        }
    }

    /// Adds `scale * values[i]` at positions produced by the caller; used by
    /// backward kernels that scatter.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.0.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.shape().numel()]);
        }
        f(slot.as_mut().unwrap());
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{}{}", self.shape(), if self.requires_grad() { " grad" } else { "" })
    }
}

fn nan_screening_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var("SARNET_DEBUG_NAN").map(|v| v == "1").unwrap_or(false))
}

/// With `SARNET_DEBUG_NAN=1`, panics if `out` holds a non-finite value.
pub(crate) fn screen_nonfinite<T: Scalar>(op: &'static str, out: &Tensor<T>) {
    if nan_screening_enabled() {
        if let Some(pos) = out.data().iter().position(|v| !v.is_finite()) {
            panic!("non-finite value after op `{op}` at flat index {pos}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariants() {
        assert!(Tensor::<f32>::from_vec(Shape([2, 3, 4, 5]), vec![0.0; 120]).is_ok());
        assert!(Tensor::<f32>::from_vec(Shape([2, 3, 4, 5]), vec![0.0; 119]).is_err());
        let err = Tensor::<f32>::from_vec(Shape([2, 0, 4, 5]), vec![]).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: 1, .. }));
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::<f64>::param(Shape([1, 1, 1, 2]), vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 10.0]);
        t.accumulate_grad(&[2.0, 20.0]);
        assert_eq!(t.grad().unwrap(), vec![3.0, 30.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::<f64>::new();
        let t = Tensor::<f64>::param(Shape([1, 1, 1, 2]), vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(&t).is_err());
    }

    #[test]
    fn backward_visits_each_entry_once() {
        use std::cell::Cell;
        use std::rc::Rc;
        let calls = Rc::new(Cell::new(0usize));
        let tape = Tape::<f64>::new();
        for _ in 0..5 {
            let calls = calls.clone();
            super::tape::record::<f64>("probe", move || calls.set(calls.get() + 1));
        }
        assert_eq!(tape.len(), 5);
        let loss = Tensor::<f64>::scalar(0.0);
        tape.backward(&loss).unwrap();
        assert_eq!(calls.get(), 5);
    }
}
