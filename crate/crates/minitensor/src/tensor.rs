//! Tensor values and the reverse-mode graph.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Enable or disable graph recording on the current thread. Returns the
/// previous setting.
pub fn set_grad_enabled(enabled: bool) -> bool {
    GRAD_ENABLED.with(|g| g.replace(enabled))
}

/// Run a closure with graph recording off (evaluation mode forward passes).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = set_grad_enabled(false);
    let out = f();
    set_grad_enabled(prev);
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<E> = Box<dyn Fn(&[E])>;

pub(crate) struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    pub(crate) value: RefCell<Vec<E>>,
    pub(crate) grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// Dense multi-dimensional value, optionally recorded in a reverse-mode
/// graph. Cloning is cheap (shared node).
pub struct Tensor<E: Scalar> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Tensor<E> {
    fn make(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                value: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// A constant leaf: never tracked, never receives gradients.
    pub fn constant(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self::make(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// A trainable leaf (model parameter).
    pub fn parameter(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self::make(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape, vec![E::ZERO; shape.iter().product()])
    }

    pub fn scalar(x: E) -> Self {
        Self::constant(&[1], vec![x])
    }

    /// Result of an operation. Records the backward rule only while gradient
    /// tracking is enabled and at least one parent is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Self::make(shape, data, true, parents, Some(Box::new(backward)))
        } else {
            Self::make(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn value(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.inner.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.value.borrow().clone()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.value.borrow()[0]
    }

    /// Overwrite the stored value in place (optimizer steps). Shape must not
    /// change.
    pub fn set_value(&self, data: &[E]) {
        let mut v = self.inner.value.borrow_mut();
        assert_eq!(v.len(), data.len(), "set_value: length mismatch");
        v.copy_from_slice(data);
    }

    /// Mutate the stored value in place through a closure.
    pub fn update_value(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same value, detached from the graph.
    pub fn detach(&self) -> Tensor<E> {
        Self::constant(&self.inner.shape.clone(), self.to_vec())
    }

    /// Add a contribution into this tensor's gradient buffer. Backward rules
    /// and optimizers use this; contributions always add.
    pub fn accumulate_grad(&self, contribution: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse pass from a scalar output. Visits each node exactly once in
    /// reverse topological order, accumulating gradients additively into
    /// every tracked ancestor.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: format!("requires a scalar output, got shape {:?}", self.shape()),
            });
        }
        let order = self.topo_order();
        self.accumulate_grad(&[E::ONE]);
        for node in order.iter().rev() {
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(bw) = &node.inner.backward {
                bw(&grad);
            }
            // Intermediate gradients are not kept around; leaves retain theirs.
            if node.inner.backward.is_some() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over parents.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, next parent index to visit)
        let mut stack: Vec<(Tensor<E>, usize)> = Vec::new();
        if visited.insert(self.inner.id) {
            stack.push((self.clone(), 0));
        }
        while let Some((node, idx)) = stack.pop() {
            if idx < node.inner.parents.len() {
                let parent = node.inner.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
