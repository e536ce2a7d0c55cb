//! Dense f64 tensors with reverse-mode gradients.
//!
//! Everything the detector computes flows through [`Tensor`]: feature maps,
//! head outputs, and the final scalar loss. A tensor is an immutable value
//! plus an optional graph node recording how it was produced; calling
//! [`Tensor::backward`] on a scalar walks the graph once in reverse
//! topological order and accumulates gradients into every tensor that
//! requires them. Parameters are ordinary leaf tensors mutated only by
//! [`sgd_step`].
//!
//! All storage is 64-bit: at desk scale the precision buys tight
//! finite-difference tolerances for free.

mod checkpoint;
mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, gradcheck_coords};
pub use ops::{
    add, conv2d, conv2d_depthwise, mul, relu, reshape, scale, sigmoid, sum, upsample_nearest_2x,
    ConvParams,
};
pub(crate) use ops::sigmoid_scalar;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Reverse-mode node: how a tensor was produced and how to push gradients
/// back into its parents.
pub(crate) trait GraphNode {
    /// Direct inputs of the op, in a fixed order.
    fn parents(&self) -> Vec<Tensor>;
    /// Accumulate `d(loss)/d(parent)` into each parent that requires grad,
    /// given the op's forward output values and `d(loss)/d(output)`.
    fn backward(&self, out_values: &[f64], grad_out: &[f64]);
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    node: Option<Box<dyn GraphNode>>,
}

/// N-dimensional array of f64 values, cheap to clone (shared storage).
///
/// Image-like data uses NCHW order. Values are immutable after creation
/// except for parameter updates through [`sgd_step`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape,
            self.inner.requires_grad.get()
        )
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, node: Option<Box<dyn GraphNode>>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                node,
            }),
        }
    }

    /// Leaf tensor from explicit values. Panics if the element count does
    /// not match the shape product.
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not hold {} values",
            shape,
            values.len()
        );
        Tensor::new(shape.to_vec(), values, false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// He-uniform initialization: U(−b, b) with b = sqrt(6 / fan_in).
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::from_vec(shape, values).with_grad()
    }

    /// Mark a leaf tensor as requiring gradients.
    pub fn with_grad(self) -> Tensor {
        assert!(self.inner.node.is_none(), "with_grad applies to leaf tensors");
        self.inner.requires_grad.set(true);
        self
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, node: Box<dyn GraphNode>) -> Tensor {
        debug_assert_finite(&values);
        Tensor::new(shape, values, true, Some(node))
    }

    pub(crate) fn from_value(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_finite(&values);
        Tensor::new(shape, values, false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flip gradient tracking on a leaf (used to freeze parameters for
    /// inference-only runs).
    pub fn set_requires_grad(&self, value: bool) {
        assert!(self.inner.node.is_none(), "only leaf tensors can be toggled");
        self.inner.requires_grad.set(value);
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Single stored value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.inner.values.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.len());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn value_at(&self, idx: usize) -> f64 {
        self.inner.values.borrow()[idx]
    }

    pub(crate) fn set_value_at(&self, idx: usize, v: f64) {
        self.inner.values.borrow_mut()[idx] = v;
    }

    /// Overwrite a leaf's values wholesale (checkpoint restore).
    pub(crate) fn copy_values_from(&self, values: &[f64]) {
        assert!(self.inner.node.is_none(), "only leaf tensors can be overwritten");
        assert_eq!(values.len(), self.len());
        self.inner.values.borrow_mut().copy_from_slice(values);
    }

    /// Reverse-mode pass from a scalar output. Gradients accumulate into
    /// every reachable tensor with `requires_grad` set; leaves keep theirs
    /// until [`Tensor::zero_grad`] or [`sgd_step`].
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar loss tensor");
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            if let Some(node) = &t.inner.node {
                let grad = {
                    let slot = t.inner.grad.borrow();
                    match slot.as_ref() {
                        Some(g) => g.clone(),
                        None => continue,
                    }
                };
                let values = t.inner.values.borrow();
                node.backward(&values, &grad);
            }
        }
    }
}

/// Post-order DFS over the op graph; reversing the result yields a valid
/// backward schedule (every tensor before its parents).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    enum Frame {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![Frame::Enter(root.clone())];
    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(t) => {
                if !visited.insert(t.id()) {
                    continue;
                }
                stack.push(Frame::Exit(t.clone()));
                if let Some(node) = &t.inner.node {
                    for p in node.parents() {
                        if p.requires_grad() && !visited.contains(&p.id()) {
                            stack.push(Frame::Enter(p));
                        }
                    }
                }
            }
            Frame::Exit(t) => order.push(t),
        }
    }
    order
}

pub(crate) fn debug_assert_finite(values: &[f64]) {
    if cfg!(debug_assertions) {
        for (i, v) in values.iter().enumerate() {
            debug_assert!(v.is_finite(), "non-finite value {v} at flat index {i}");
        }
    }
}

/// Plain SGD settings. The seed drives weight initialization and data-order
/// shuffling so that a fixed config reproduces a training run bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, seed: u64) -> Result<SgdConfig> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {learning_rate}"
            )));
        }
        Ok(SgdConfig { learning_rate, seed })
    }
}

/// One SGD step: `p ← p − lr·g` for every parameter, then gradients are
/// zeroed. Parameters with no accumulated gradient are left untouched.
pub fn sgd_step(params: &[Tensor], cfg: &SgdConfig) {
    let lr = cfg.learning_rate;
    for p in params {
        if let Some(g) = p.inner.grad.borrow().as_ref() {
            let mut vals = p.inner.values.borrow_mut();
            for (v, gi) in vals.iter_mut().zip(g) {
                *v -= lr * gi;
            }
        }
        p.zero_grad();
    }
}
