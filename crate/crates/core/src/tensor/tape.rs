//! Reverse-mode gradient tape.
//!
//! Every differentiable primitive appends one entry while a tape is active on
//! the current thread. Entries are appended in execution order, so the list is
//! topologically ordered by construction; `backward` replays it once, in
//! reverse, accumulating gradients additively across fan-out.

use std::cell::RefCell;
use std::rc::Rc;

use super::scalar::Scalar;
use super::Tensor;
use crate::error::{Error, Result};

struct Entry {
    #[allow(dead_code)]
    op: &'static str,
    back: Box<dyn FnMut()>,
}

pub struct TapeInner<T: Scalar> {
    entries: RefCell<Vec<Entry>>,
    _marker: std::marker::PhantomData<T>,
}

/// Owner handle for a recording session. At most one tape may be active per
/// thread; dropping the handle deactivates it.
pub struct Tape<T: Scalar> {
    inner: Rc<TapeInner<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Activates a fresh tape on this thread.
    ///
    /// Panics if another tape is already active: a tape is owned by exactly
    /// one logical thread of execution.
    pub fn new() -> Self {
        let inner = Rc::new(TapeInner {
            entries: RefCell::new(Vec::new()),
            _marker: std::marker::PhantomData,
        });
        T::tape_slot().with(|slot| {
            let mut slot = slot.borrow_mut();
            assert!(slot.is_none(), "a tape is already active on this thread");
            *slot = Some(inner.clone());
        });
        Tape { inner }
    }

    pub fn is_active() -> bool {
        T::tape_slot().with(|slot| slot.borrow().is_some())
    }

    pub fn len(&self) -> usize {
        self.inner.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seeds `loss` with gradient 1 and replays the tape in reverse,
    /// consuming the recorded entries.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.shape().numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss of dims (1,1,1,1), got {:?}",
                loss.shape()
            )));
        }
        loss.accumulate_grad(&[T::one()]);
        let mut entries = std::mem::take(&mut *self.inner.entries.borrow_mut());
        for entry in entries.iter_mut().rev() {
            (entry.back)();
        }
        Ok(())
    }
}

impl<T: Scalar> Drop for Tape<T> {
    fn drop(&mut self) {
        T::tape_slot().with(|slot| {
            *slot.borrow_mut() = None;
        });
    }
}

/// Appends a backward closure to the active tape, if any.
pub(crate) fn record<T: Scalar>(op: &'static str, back: impl FnMut() + 'static) {
    T::tape_slot().with(|slot| {
        if let Some(inner) = slot.borrow().as_ref() {
            inner.entries.borrow_mut().push(Entry { op, back: Box::new(back) });
        }
    });
}

/// True when a tape is active and at least one input wants gradients.
#[inline]
pub(crate) fn should_record<T: Scalar>(requires_grad: bool) -> bool {
    requires_grad && Tape::<T>::is_active()
}
