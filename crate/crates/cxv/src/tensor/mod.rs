//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to an n-dimensional array. Values are
//! immutable after creation except for two sanctioned mutations: optimizer
//! updates of parameter data and gradient accumulation during backward.
//! Differentiation is tape-based: a [`Ctx`](ops::Ctx) with an active
//! [`Tape`](tape::Tape) records every operation in execution order, and
//! `backward` replays the records in reverse.

pub mod grad_check;
pub(crate) mod kernels;
pub mod ops;
pub mod shape;
pub mod tape;

pub use grad_check::grad_check;
pub use ops::Ctx;
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;

use crate::error::{CxvError, Result};
use crate::scalar::Scalar;

struct TensorInner<E: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    /// (tape generation, node id) of the most recent tape this tensor was
    /// registered on. Stale links from dropped tapes are detected by the
    /// generation counter.
    tape_link: Cell<Option<(u64, u32)>>,
}

/// Shared handle to a dense array of scalars. Cloning is O(1).
pub struct Tensor<E: Scalar> {
    inner: Rc<TensorInner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<E: Scalar> Tensor<E> {
    fn build(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CxvError::Dim(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                tape_link: Cell::new(None),
            }),
        })
    }

    /// Non-trainable tensor from a flat row-major buffer.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape.to_vec(), false)
    }

    /// Trainable parameter: gradients accumulate into it during backward.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape.to_vec(), true)
    }

    /// Parameter initialized from `uniform(-bound, bound)`.
    pub fn param_uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Self::build(data, shape.to_vec(), true).expect("shape/data consistent by construction")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::build(vec![E::zero(); numel], shape.to_vec(), false).expect("consistent")
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Self::build(vec![value; numel], shape.to_vec(), false).expect("consistent")
    }

    /// Rank-0 scalar.
    pub fn scalar(value: E) -> Self {
        Self::build(vec![value], Vec::new(), false).expect("consistent")
    }

    /// `value * I`, an m x m scaled identity.
    pub fn eye_scaled(m: usize, value: E) -> Self {
        let mut data = vec![E::zero(); m * m];
        for i in 0..m {
            data[i * m + i] = value;
        }
        Self::build(data, vec![m, m], false).expect("consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw values. Reserved for optimizer updates and
    /// checkpoint restore; never call while a tape recording is in flight.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(CxvError::Usage(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<E>>> {
        self.inner.grad.borrow()
    }

    /// Add `delta` into the gradient accumulator (allocating it on first use).
    pub fn accumulate_grad(&self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Drop the accumulated gradient. Callers zero between optimizer steps.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn tape_link(&self) -> Option<(u64, u32)> {
        self.inner.tape_link.get()
    }

    pub(crate) fn set_tape_link(&self, gen: u64, node: u32) {
        self.inner.tape_link.set(Some((gen, node)));
    }

    /// True when another handle to this tensor exists outside the tape.
    pub(crate) fn is_externally_held(&self) -> bool {
        Rc::strong_count(&self.inner) > 1
    }

    /// Same data viewed under a new shape with equal element count.
    /// Used by tape-free plumbing; differentiable reshape lives on `Ctx`.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(CxvError::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Tensor::from_vec(self.to_vec(), shape)
    }

    /// Max |x| over all elements, as f64.
    pub fn max_abs(&self) -> f64 {
        self.inner
            .data
            .borrow()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_an_error() {
        let r = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]);
        assert!(matches!(r, Err(CxvError::Dim(_))));
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::<f64>::param(vec![0.0, 0.0], &[2]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::<f32>::scalar(2.5);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.item().unwrap(), 2.5);
        let v = Tensor::<f32>::zeros(&[3]);
        assert!(v.item().is_err());
    }
}
