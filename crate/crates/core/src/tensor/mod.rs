//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Training runs at 64-bit precision. A `Tensor` records the operation that
//! produced it; calling [`Tensor::backward`] on a scalar walks the recorded
//! graph once in reverse topological order and accumulates gradients into
//! every reachable tensor with `requires_grad` set.
//!
//! Tensors created from raw data (no recorded op) are leaves; the optimizer
//! mutates leaf storage in place between steps. Storage may be shared between
//! a flat vector and reshaped/narrowed views of it, so a write through the
//! flat tensor is observable through every view.

mod ops;
#[cfg(test)]
mod tests;

pub use ops::{concat_rows, gelu_scalar, sigmoid_scalar};

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

/// Gradient contributions for each parent of an op, `None` where the parent
/// does not require grad.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct BackOp {
    parents: Vec<Tensor>,
    back: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    /// Shared storage; views alias the same buffer at a different offset.
    data: Rc<RefCell<Vec<f64>>>,
    offset: usize,
    len: usize,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: RefCell<Option<BackOp>>,
}

/// Reference-counted tensor handle. Cloning is cheap and aliases the value.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn next_id() -> u64 {
    use std::cell::Cell;
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(
        data: Rc<RefCell<Vec<f64>>>,
        offset: usize,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<BackOp>,
    ) -> Tensor {
        let len = numel(&shape);
        debug_assert!(offset + len <= data.borrow().len());
        debug_assert!(
            data.borrow()[offset..offset + len].iter().all(|v| v.is_finite()),
            "non-finite value produced in tensor of shape {shape:?}"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                offset,
                len,
                requires_grad,
                grad: RefCell::new(None),
                op: RefCell::new(op),
            }),
        }
    }

    /// Constant tensor from raw data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor::new_inner(Rc::new(RefCell::new(data)), 0, shape.to_vec(), false, None)
    }

    /// Trainable leaf tensor (accumulates gradient).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), data.len());
        Tensor::new_inner(Rc::new(RefCell::new(data)), 0, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![1.0; numel(shape)], shape)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[])
    }

    /// Result of an op. Grad is only tracked when some parent requires it.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: &[usize],
        parents: Vec<Tensor>,
        back: BackwardFn,
    ) -> Tensor {
        assert_eq!(numel(shape), data.len());
        let requires = parents.iter().any(|p| p.requires_grad());
        let op = requires.then_some(BackOp { parents, back });
        Tensor::new_inner(Rc::new(RefCell::new(data)), 0, shape.to_vec(), requires, op)
    }

    /// View of the same storage with a new shape (element count preserved).
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.inner.len,
            "cannot reshape {:?} to {shape:?}",
            self.shape()
        );
        let op = self.requires_grad().then(|| BackOp {
            parents: vec![self.clone()],
            back: Box::new(|g: &[f64]| vec![Some(g.to_vec())]),
        });
        Tensor::new_inner(
            self.inner.data.clone(),
            self.inner.offset,
            shape.to_vec(),
            self.requires_grad(),
            op,
        )
    }

    /// Contiguous sub-range view along a flattened index range.
    /// `self` must be 1-D; used for addressing slices of a flat θ vector.
    pub fn narrow(&self, start: usize, len: usize) -> Tensor {
        assert!(self.rank() <= 1, "narrow expects a flat tensor");
        assert!(start + len <= self.inner.len);
        let op = self.requires_grad().then(|| {
            let total = self.inner.len;
            BackOp {
                parents: vec![self.clone()],
                back: Box::new(move |g: &[f64]| {
                    let mut full = vec![0.0; total];
                    full[start..start + len].copy_from_slice(g);
                    vec![Some(full)]
                }),
            }
        });
        Tensor::new_inner(
            self.inner.data.clone(),
            self.inner.offset + start,
            vec![len],
            self.requires_grad(),
            op,
        )
    }

    /// Same values, detached from the graph and non-trainable.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.to_vec(), &self.shape().to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.len
    }

    pub fn is_empty(&self) -> bool {
        self.inner.len == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the underlying values.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.data.borrow(), |v| {
            &v[self.inner.offset..self.inner.offset + self.inner.len]
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.inner.len, 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    /// Overwrite leaf storage in place (optimizer update path).
    pub fn set_data(&self, new: &[f64]) {
        assert_eq!(new.len(), self.inner.len);
        self.inner.data.borrow_mut()[self.inner.offset..self.inner.offset + self.inner.len]
            .copy_from_slice(new);
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable tensor with `requires_grad`; unreachable parameters are
    /// simply left untouched (their grad reads as zero).
    pub fn backward(&self) -> Result<()> {
        if self.inner.len != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }

        // Iterative post-order DFS over recorded ops; each node visited once.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.inner.op.borrow().as_ref() {
                for p in &op.parents {
                    if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(op) = t.inner.op.borrow_mut().take() else {
                continue;
            };
            let grad_out = match t.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let contribs = (op.back)(&grad_out);
            debug_assert_eq!(contribs.len(), op.parents.len());
            for (parent, contrib) in op.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    debug_assert_eq!(c.len(), parent.len());
                    parent.accumulate_grad(&c);
                }
            }
            // Intermediate grads are not needed once consumed.
            if t.inner.id != self.inner.id {
                *t.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
