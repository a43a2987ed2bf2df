//! Element types usable inside [`Tensor`](super::Tensor).
//!
//! Training runs in `f32`; gradient checking runs in `f64`. Each type owns a
//! thread-local slot for the active [`Tape`](super::tape::Tape), so ops can
//! record themselves without every call site threading a tape handle through.

use std::cell::RefCell;
use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::thread::LocalKey;

use super::tape::TapeInner;

pub type TapeSlot<T> = RefCell<Option<Rc<TapeInner<T>>>>;

pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// Dtype code used by the tensor file format (1 = f32, 2 = f64).
    const DTYPE_CODE: u8;

    fn tape_slot() -> &'static LocalKey<TapeSlot<Self>>;

    #[inline(always)]
    fn fl(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

thread_local! {
    static TAPE_F32: TapeSlot<f32> = const { RefCell::new(None) };
    static TAPE_F64: TapeSlot<f64> = const { RefCell::new(None) };
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 1;

    fn tape_slot() -> &'static LocalKey<TapeSlot<f32>> {
        &TAPE_F32
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 2;

    fn tape_slot() -> &'static LocalKey<TapeSlot<f64>> {
        &TAPE_F64
    }
}
