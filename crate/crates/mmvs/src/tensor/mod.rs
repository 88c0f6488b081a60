//! Minimal reverse-mode autodiff tensor core.
//!
//! Tensors form a dynamically built computation graph: every op allocates a
//! fresh node holding its output values, references to its parents, and a
//! backward closure. Calling [`Tensor::backward`] on a scalar walks the graph
//! in reverse topological order and accumulates gradients into every node
//! that needs one. Graphs are freed as soon as the last tensor handle to
//! them drops.
//!
//! Values are kept in `f64` buffers but, under the default [`Precision::F32`]
//! mode, every op output is rounded to the nearest `f32` before it is stored.
//! That keeps forward results exactly representable in the 32-bit checkpoint
//! format (save/resume is bit-exact) while all arithmetic and gradient
//! accumulation run in 64-bit. Tests that compare gradients against central
//! finite differences switch to [`Precision::F64`] so the difference quotient
//! is not dominated by rounding of the forward pass.

mod conv;
mod gradcheck;
mod ops;
mod params;
mod sample;

pub use gradcheck::{check_tensor_grad, finite_diff_grad, gradcheck_params, GradCheckReport};
pub use params::{kaiming_uniform, AdamState, ParamSet};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{MvsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

/// Runs `f` under the given precision, restoring the previous mode after.
pub fn with_precision<T>(p: Precision, f: impl FnOnce() -> T) -> T {
    let old = precision();
    set_precision(p);
    let out = f();
    set_precision(old);
    out
}

#[inline]
fn round_value(v: f64) -> f64 {
    match precision() {
        Precision::F32 => v as f32 as f64,
        Precision::F64 => v,
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

pub(crate) struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    /// Leaf marked as trainable.
    requires_grad: bool,
    /// True if this node or any ancestor requires grad.
    needs_grad: bool,
}

/// A shape-tagged value buffer participating in the autodiff graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Tensor {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count must equal product of shape"
        );
        if cfg!(debug_assertions) {
            for &v in &values {
                assert!(v.is_finite(), "non-finite tensor value {v}");
            }
        }
        let needs_grad = requires_grad || parents.iter().any(|p| p.0.needs_grad);
        Tensor(Rc::new(Node {
            shape,
            values,
            grad: RefCell::new(None),
            parents,
            backward,
            requires_grad,
            needs_grad,
        }))
    }

    /// Leaf tensor holding constants (no gradient tracking).
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Tensor {
        let values = values.into_iter().map(round_value).collect();
        Tensor::new_node(shape.to_vec(), values, Vec::new(), None, false)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        let values = values.into_iter().map(round_value).collect();
        Tensor::new_node(shape.to_vec(), values, Vec::new(), None, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Graph-internal node. Output values are rounded per the precision mode.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let values = values.into_iter().map(round_value).collect();
        Tensor::new_node(shape, values, parents, Some(backward), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn value(&self) -> f64 {
        assert_eq!(self.len(), 1, "value() requires a scalar tensor");
        self.0.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Gradient populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, idx: usize, v: f64) {
        let mut g = self.0.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.len()]);
        buf[idx] += v;
    }

    pub(crate) fn accumulate_grad_slice(&self, vs: &[f64]) {
        let mut g = self.0.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.len()]);
        for (b, v) in buf.iter_mut().zip(vs) {
            *b += v;
        }
    }

    /// Cuts the graph: returns a constant leaf with the same values.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.0.shape, self.0.values.clone())
    }

    /// Same values as a fresh trainable leaf.
    pub fn detach_as_param(&self) -> Tensor {
        Tensor::param(&self.0.shape, self.0.values.clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(MvsError::shape(format!(
                "reshape {:?} -> {:?}",
                self.0.shape, shape
            )));
        }
        let this = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.0.values.clone(),
            vec![this],
            Box::new(|grad_out, parents| {
                if parents[0].needs_grad() {
                    parents[0].accumulate_grad_slice(grad_out);
                }
            }),
        ))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar loss");
        self.backward_with_seed(&[1.0]);
    }

    pub fn backward_with_seed(&self, seed: &[f64]) {
        assert_eq!(seed.len(), self.len());
        // Reverse topological order via iterative post-order DFS.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let ptr = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains(&ptr) || !t.0.needs_grad {
                continue;
            }
            visited.insert(ptr);
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                stack.push((p.clone(), false));
            }
        }
        if !self.0.needs_grad {
            return;
        }
        self.accumulate_grad_slice(seed);
        for t in order.iter().rev() {
            if let Some(bw) = &t.0.backward {
                let grad = t.0.grad.borrow().clone();
                if let Some(g) = grad {
                    bw(&g, &t.0.parents);
                }
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
