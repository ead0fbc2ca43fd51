//! Dense NCHW tensors with reverse-mode automatic differentiation.
//!
//! The op set covers exactly the layers the networks in this crate need:
//! convolution, batch normalization, leaky ReLU, max / global-average
//! pooling, dense, softmax cross-entropy, and a handful of elementwise
//! primitives the loss arithmetic is built from.
//!
//! A `Tensor` is a cheap-to-clone handle onto a graph node. Ops allocate a
//! new node holding the forward values plus a closure that scatters the
//! output gradient back to the node's parents. `backward` walks the graph
//! in reverse topological order. Ops never mutate their inputs; the two
//! documented exceptions are `sgd_step` (parameter update) and the
//! batch-norm running-state update in training mode.
//!
//! A single graph is single-threaded by construction (`Tensor` is not
//! `Send`); heavy kernels parallelize internally over the batch dimension
//! with a fixed partitioning, so results are bit-identical regardless of
//! thread count.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distr::uniform::SampleUniform;

use crate::error::{Error, Result};

mod conv;
mod norm;
mod ops;
mod param;

pub use conv::conv2d;
pub use norm::{batchnorm, BatchNormState};
pub use ops::{
    add, dense, flatten, global_avgpool, leaky_relu, masked_abs_diff_mean, maxpool2d, mul, relu,
    scale, softmax_cross_entropy, sum,
};
pub use param::{sgd_step, zero_grads, Parameter};

/// Tag identifying the element type of serialized tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element type of a tensor. Training runs in `f32`; `f64` exists
/// for high-precision gradient verification.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// Convert an `f64` literal into the element type.
pub(crate) fn lit<T: Element>(x: f64) -> T {
    T::from_f64(x).expect("literal conversion")
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Inner<T: Element> {
    values: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle onto one node of the computation graph.
pub struct Tensor<T: Element> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    /// New leaf tensor. `requires_grad` marks it as a gradient sink.
    pub fn leaf(values: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "value count {} does not match shape {:?} (numel {})",
                values.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                values,
                shape,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        })
    }

    pub fn from_vec(values: Vec<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        Tensor::leaf(values, shape, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<T> {
        let numel = shape.iter().product();
        Tensor::leaf(vec![T::zero(); numel], shape, false).expect("zeros")
    }

    pub fn scalar_value(value: T) -> Tensor<T> {
        Tensor::leaf(vec![value], vec![1], false).expect("scalar")
    }

    /// Graph-node constructor used by ops. The backward closure receives
    /// the output gradient and accumulates into the parents it captured.
    fn from_op(
        values: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                values,
                shape,
                grad: None,
                requires_grad,
                parents,
                backward,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the forward values.
    pub fn values(&self) -> Vec<T> {
        self.inner.borrow().values.clone()
    }

    /// Run `f` over the forward values without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.values.len(), 1, "item() on non-scalar tensor");
        inner.values[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Leaf copy of the values, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        let inner = self.inner.borrow();
        Tensor::leaf(inner.values.clone(), inner.shape.clone(), false).expect("detach")
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().values.iter().all(|v| v.is_finite())
    }

    /// Overwrite values in place (parameter updates). Shape must match.
    pub(crate) fn set_values(&self, values: &[T]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.values.len(), values.len());
        inner.values.copy_from_slice(values);
    }

    fn accumulate_grad(&self, delta: &[T]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(inner.values.len(), delta.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    fn ptr(&self) -> *const RefCell<Inner<T>> {
        Rc::as_ptr(&self.inner)
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable node with
    /// `requires_grad` accumulates its gradient; leaves keep theirs until
    /// `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Input(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(()); // nothing reachable wants gradients
        }

        // Iterative post-order DFS; reversed post-order processes every
        // node after all of its consumers.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const RefCell<Inner<T>>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, child_idx)) = stack.pop() {
            let next = {
                let inner = node.inner.borrow();
                inner.parents.get(child_idx).cloned()
            };
            match next {
                Some(parent) => {
                    stack.push((node, child_idx + 1));
                    if parent.requires_grad() && visited.insert(parent.ptr()) {
                        stack.push((parent, 0));
                    }
                }
                None => order.push(node),
            }
        }

        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let grad = {
                let inner = node.inner.borrow();
                match (&inner.grad, inner.backward.is_some()) {
                    (Some(g), true) => Some(g.clone()),
                    _ => None,
                }
            };
            if let Some(g) = grad {
                let inner = node.inner.borrow();
                (inner.backward.as_ref().unwrap())(&g);
            }
        }
        Ok(())
    }
}

/// Shape helper: interpret as NCHW, or fail with a descriptive error.
pub(crate) fn dims4<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "{what} must be 4-D (NCHW), got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

pub(crate) fn dims2<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("{what} must be 2-D, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch_rejected() {
        let r = Tensor::<f32>::leaf(vec![1.0, 2.0, 3.0], vec![2, 2], false);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::<f32>::leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let y = scale(&t, 2.0);
        assert!(matches!(y.backward(), Err(Error::Input(_))));
    }

    #[test]
    fn grad_accumulates_across_shared_use() {
        // y = x + x  =>  dy/dx = 2
        let x = Tensor::<f64>::leaf(vec![3.0], vec![1], true).unwrap();
        let y = add(&x, &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = Tensor::<f64>::leaf(vec![3.0], vec![1], true).unwrap();
        let d = x.detach();
        let y = scale(&d, 5.0);
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
