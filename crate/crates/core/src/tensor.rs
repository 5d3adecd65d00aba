//! Dense row-major double-precision tensors.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to immutable data plus,
//! when the tensor participates in differentiation, a same-shape gradient
//! accumulator. Data never changes after construction; only the gradient
//! buffer is interior-mutable. Handles are not `Send`: the whole graph
//! machinery is single-threaded by design, one graph per thread.

use std::cell::RefCell;
use std::rc::Rc;

/// Shape of a scalar. Scalars are rank-1 tensors with one element.
pub const SCALAR_SHAPE: [usize; 1] = [1];

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Present iff the tensor requires gradients.
    grad: Option<RefCell<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorData>,
}

impl Tensor {
    /// Constant tensor (no gradient). Panics if `data.len()` does not match
    /// the product of extents; that is a construction bug, not input error.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Tensor {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(TensorData {
                shape,
                data,
                grad: None,
            }),
        }
    }

    /// Trainable tensor: carries a zeroed gradient accumulator.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Tensor {
        let t = Tensor::new(shape, data);
        t.with_grad()
    }

    /// One-element scalar tensor.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(SCALAR_SHAPE, vec![v])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    /// Same data, gradient accumulator attached.
    pub fn with_grad(&self) -> Tensor {
        Tensor {
            inner: Rc::new(TensorData {
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                grad: Some(RefCell::new(vec![0.0; self.inner.data.len()])),
            }),
        }
    }

    /// Same data, no gradient and no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.shape.clone(), self.inner.data.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.grad.is_some()
    }

    /// Snapshot of the gradient accumulator, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.as_ref().map(|g| g.borrow().clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.inner.grad {
            g.borrow_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `delta` into the gradient accumulator. No-op on constants.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if let Some(g) = &self.inner.grad {
            let mut g = g.borrow_mut();
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    pub(crate) fn set_grad(&self, values: Vec<f64>) {
        if let Some(g) = &self.inner.grad {
            debug_assert_eq!(g.borrow().len(), values.len());
            *g.borrow_mut() = values;
        }
    }

    /// Stable identity for graph bookkeeping (handles sharing storage
    /// compare equal).
    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_matches_shape_product() {
        let t = Tensor::new([2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
        assert!(!t.requires_grad());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn length_mismatch_panics() {
        let _ = Tensor::new([2, 3], vec![0.0; 5]);
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let t = Tensor::param([3], vec![1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 1.5, 1.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn clones_share_gradient_storage() {
        let t = Tensor::param([2], vec![1.0, 1.0]);
        let u = t.clone();
        u.accumulate_grad(&[2.0, 2.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(t.id(), u.id());
    }

    #[test]
    fn detach_drops_grad_and_identity() {
        let t = Tensor::param([2], vec![1.0, 1.0]);
        let d = t.detach();
        assert!(!d.requires_grad());
        assert_ne!(t.id(), d.id());
        assert_eq!(d.data(), t.data());
    }
}
