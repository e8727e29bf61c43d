//! Reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! A [`Tensor`] is a node in a dynamically built computation graph. Ops record
//! their parents and a backward closure; [`Tensor::backward`] walks the graph
//! in reverse topological order and accumulates gradients into every node that
//! requires them. Gradient tracking is a thread-local switch so inference can
//! run without building a tape (see [`no_grad`]).

use ndarray::{ArrayD, IxDyn};
use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub type Data = ArrayD<f64>;

/// Maps the gradient of an op's output to gradient contributions for each
/// parent, in parent order. `None` entries mean "no gradient for this parent".
pub type BackwardFn = Box<dyn Fn(&Data) -> Vec<Option<Data>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient tracking disabled on the current thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node {
    id: u64,
    data: RwLock<Data>,
    grad: Mutex<Option<Data>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A shared handle to a value in the computation graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor(Arc::new(node))
    }

    /// A constant leaf: carries data, never receives a gradient.
    pub fn constant(data: Data) -> Self {
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: RwLock::new(data),
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A trainable leaf: accumulates gradients during backward passes.
    pub fn parameter(data: Data) -> Self {
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: RwLock::new(data),
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Builds an op node. When gradients are globally disabled or no parent
    /// requires them, the result is a detached constant so intermediate
    /// activations can be freed as soon as they go out of scope.
    pub fn from_op(data: Data, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::constant(data);
        }
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: RwLock::new(data),
            grad: Mutex::new(None),
            parents,
            backward: Some(backward),
            requires_grad: true,
        })
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.data.read().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.data.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Read access to the underlying array.
    pub fn data(&self) -> RwLockReadGuard<'_, Data> {
        self.0.data.read()
    }

    /// Owned copy of the underlying array.
    pub fn to_data(&self) -> Data {
        self.0.data.read().clone()
    }

    /// Replaces the stored array. Intended for parameter updates and test
    /// fixtures; the new value must keep the shape.
    pub fn set_data(&self, value: Data) {
        let mut guard = self.0.data.write();
        assert_eq!(
            guard.shape(),
            value.shape(),
            "set_data must preserve the tensor shape"
        );
        *guard = value;
    }

    /// In-place update through a closure (used by optimizers).
    pub fn update_data(&self, f: impl FnOnce(&mut Data)) {
        f(&mut self.0.data.write());
    }

    pub fn scalar(&self) -> f64 {
        let d = self.0.data.read();
        assert_eq!(d.len(), 1, "scalar() called on non-scalar tensor");
        *d.iter().next().unwrap()
    }

    pub fn from_scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Data> {
        self.0.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// Takes the gradient out, leaving `None`.
    pub fn take_grad(&self) -> Option<Data> {
        self.0.grad.lock().take()
    }

    fn accumulate_grad(&self, g: Data) {
        let mut guard = self.0.grad.lock();
        match guard.as_mut() {
            Some(existing) => *existing += &g,
            None => *guard = Some(g),
        }
    }

    /// Reverse-mode pass seeded with `d(self)/d(self) = 1`. `self` must hold a
    /// single element (a scalar loss).
    pub fn backward(&self) {
        let seed = ArrayD::from_elem(IxDyn(&self.shape()), 1.0);
        assert_eq!(seed.len(), 1, "backward() expects a scalar loss tensor");
        self.backward_with(seed);
    }

    /// Reverse-mode pass with an explicit output gradient.
    pub fn backward_with(&self, seed: Data) {
        assert_eq!(
            seed.shape(),
            self.shape().as_slice(),
            "seed gradient shape mismatch"
        );
        let order = self.topo_order();
        self.accumulate_grad(seed);
        // Reverse topological order: every node's gradient is complete before
        // it is propagated to its parents.
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            // Intermediate grads are consumed exactly once; taking them frees
            // memory as the walk proceeds. Leaves keep theirs.
            let grad = node.0.grad.lock().take();
            let Some(grad) = grad else { continue };
            let parent_grads = backward(&grad);
            assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        parent.accumulate_grad(pg);
                    }
                }
            }
        }
    }

    /// Post-order DFS (iterative, to stay off the call stack for deep graphs).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut state: HashMap<u64, bool> = HashMap::new(); // id -> done
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                state.insert(node.id(), true);
                order.push(node);
                continue;
            }
            match state.get(&node.id()) {
                Some(_) => continue,
                None => {
                    state.insert(node.id(), false);
                }
            }
            stack.push((node.clone(), true));
            for parent in &node.0.parents {
                if parent.requires_grad() && !state.contains_key(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
