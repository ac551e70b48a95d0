//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers with an optional gradient. Ops that
//! participate in differentiation are recorded on a [`Tape`]; calling
//! [`Tape::backward`] replays the recorded ops in reverse execution order
//! and accumulates gradients into every `requires_grad` tensor reachable
//! from the loss.

mod ops;

pub use ops::*;

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

/// Train/eval switch shared by dropout, batch norm and the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dense N-dimensional array of 64-bit floats.
///
/// Cloning a `Tensor` is cheap and shares storage; this is what lets the
/// tape accumulate gradients into the same buffers the optimizer reads.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: consistent by construction")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    /// Mutable access to the raw buffer (used by optimizers). Must not be
    /// called while a forward pass that recorded this tensor is still
    /// pending backward.
    pub fn data_mut(&self) -> RefMut<'_, [f64]> {
        RefMut::map(self.inner.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let b = self.inner.borrow();
        assert_eq!(b.data.len(), 1, "item() on non-scalar tensor");
        b.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    pub fn with_grad(self) -> Tensor {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Two handles to the same storage?
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut b = self.inner.borrow_mut();
        assert_eq!(b.data.len(), delta.len(), "gradient length mismatch");
        match &mut b.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => b.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &b.shape)
            .field("requires_grad", &b.requires_grad)
            .field("data", &b.data)
            .finish()
    }
}

type BackFn = Box<dyn FnMut()>;

/// Ordered record of differentiable operations.
///
/// Each recorded op is a closure that reads the output gradient and
/// accumulates into its inputs. Replay visits ops in exact reverse
/// execution order exactly once.
pub struct Tape {
    ops: Vec<BackFn>,
    enabled: bool,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            ops: Vec::new(),
            enabled: true,
            consumed: false,
        }
    }

    /// A tape that records nothing; use for inference.
    pub fn no_grad() -> Tape {
        Tape {
            ops: Vec::new(),
            enabled: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub(crate) fn enabled(&self) -> bool {
        self.enabled
    }

    pub(crate) fn push(&mut self, f: BackFn) {
        self.ops.push(f);
    }

    /// Seed the loss gradient with 1 and replay the tape in reverse,
    /// populating `grad` on every `requires_grad` tensor reachable from
    /// `loss`. Accumulation across fan-out is additive.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        loss.accumulate_grad(&[1.0]);
        for op in self.ops.iter_mut().rev() {
            op();
        }
        self.consumed = true;
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
