//! Reverse-mode automatic differentiation over dense row-major `f64` arrays.
//!
//! A [`Tensor`] is a node of a computation graph. Every operation creates a
//! new node that remembers its parents and a backward rule; calling
//! [`Tensor::backward`] on a scalar root walks the reachable nodes in reverse
//! creation order and accumulates gradients into every node that requires
//! them.
//!
//! Graphs are single-threaded (`Rc`); values are shared through `Arc` so
//! that parameter buffers can be bound into a graph without copying.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>)>;

/// Context handed to a backward rule: the output value, the incoming
/// gradient and the parents to accumulate into.
pub(crate) struct BackwardCtx<'a> {
    pub value: &'a [f64],
    pub grad: &'a [f64],
    pub parents: &'a [Tensor],
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in a reverse-mode computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(value: Arc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if value.len() != numel(&shape) {
            return Err(NumericsError::Dimension {
                op: "tensor",
                lhs: vec![value.len()],
                rhs: shape,
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Arc::new(values), shape.to_vec(), false)
    }

    /// Leaf tensor whose gradient is tracked.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Arc::new(values), shape.to_vec(), true)
    }

    /// Leaf tensor sharing an existing buffer.
    pub fn from_shared(values: Arc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        Self::leaf(values, shape.to_vec(), requires_grad)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(Arc::new(vec![v]), vec![], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(Arc::new(vec![0.0; numel(shape)]), shape.to_vec(), false).expect("zeros shape")
    }

    /// Internal constructor for op outputs.
    pub(crate) fn from_op(
        value: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            value: Arc::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0.value
    }

    pub fn shared_values(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.0.value)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.value[0]
    }

    /// Accumulated gradient (zeros if nothing has flowed into this node).
    pub fn grad(&self) -> Vec<f64> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same node identity (not value equality).
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Adds `f(i)` into the gradient buffer of this node.
    pub(crate) fn accumulate(&self, f: impl FnOnce(&mut [f64])) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.0.value.len()]);
        f(g);
    }

    pub(crate) fn accumulate_slice(&self, src: &[f64]) {
        self.accumulate(|g| {
            for (a, b) in g.iter_mut().zip(src) {
                *a += b;
            }
        });
    }

    /// Back-propagates from a single-element root. Gradients accumulate across
    /// calls until [`Tensor::zero_grad`] is used on the affected nodes.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward() needs a single-element root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Parents are always created before children, so decreasing id order
        // is a valid reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.0.id));

        // Interior gradients belong to this pass only; leaves accumulate.
        for node in &order {
            if node.0.backward.is_some() {
                *node.0.grad.borrow_mut() = None;
            }
        }
        self.accumulate(|g| g[0] += 1.0);
        for node in &order {
            let Some(rule) = node.0.backward.as_ref() else {
                continue;
            };
            // Release the borrow before the rule mutates parents.
            let grad = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            rule(&BackwardCtx {
                value: &node.0.value,
                grad: &grad,
                parents: &node.0.parents,
            });
        }
        Ok(())
    }

    /// Copy of the values as a non-differentiable constant.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.shared_values(), self.shape().to_vec(), false).expect("detach")
    }
}
