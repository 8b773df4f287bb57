//! Tensor handles and the reverse-mode graph.
//!
//! A [`Tensor`] is a cheap clone-able handle to an immutable dense array plus
//! the information needed to backpropagate through the operation that
//! produced it. Graphs are built define-by-run: every op records its parent
//! handles and a closure that maps the output gradient to per-parent
//! gradient contributions. [`backward`] walks the graph once in reverse
//! topological order and accumulates gradients per node.

use crate::element::Element;
use ndarray::ArrayD;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Identifier of a parameter slot inside a [`crate::store::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Gradient rule of one graph node: maps the incoming output gradient to one
/// optional contribution per parent (in parent order).
pub type BackFn<T> = Box<dyn Fn(&Node<T>, &ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

/// One node of the computation graph.
pub struct Node<T: Element> {
    id: u64,
    data: ArrayD<T>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

impl<T: Element> Node<T> {
    pub fn data(&self) -> &ArrayD<T> {
        &self.data
    }

    pub fn parents(&self) -> &[Tensor<T>] {
        &self.parents
    }

    /// Data of the `i`-th parent. Panics if out of range.
    pub fn parent_data(&self, i: usize) -> &ArrayD<T> {
        self.parents[i].data()
    }
}

/// Handle to a graph node. Clones share the underlying node.
pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("needs_grad", &self.0.needs_grad)
            .finish()
    }
}

/// Ops index into flat slices, so every node's data is kept in standard
/// (C-contiguous) layout.
fn standardize<T: Element>(data: ArrayD<T>) -> ArrayD<T> {
    if data.is_standard_layout() {
        data
    } else {
        data.as_standard_layout().into_owned()
    }
}

impl<T: Element> Tensor<T> {
    /// Wrap data with no gradient tracking.
    pub fn constant(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data: standardize(data),
            parents: Vec::new(),
            backward: None,
            param: None,
            needs_grad: false,
        }))
    }

    /// A differentiable leaf (gradients are retained for it).
    pub fn leaf(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data: standardize(data),
            parents: Vec::new(),
            backward: None,
            param: None,
            needs_grad: true,
        }))
    }

    /// A differentiable leaf bound to a named parameter slot.
    pub fn param_leaf(data: ArrayD<T>, param: ParamId) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data: standardize(data),
            parents: Vec::new(),
            backward: None,
            param: Some(param),
            needs_grad: true,
        }))
    }

    /// Record a new op node. When no parent requires gradients the result is
    /// a plain constant and neither parents nor the closure are retained, so
    /// inference passes do not grow a tape.
    pub fn from_op(
        parents: Vec<Tensor<T>>,
        data: ArrayD<T>,
        backward: impl Fn(&Node<T>, &ArrayD<T>) -> Vec<Option<ArrayD<T>>> + 'static,
    ) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        if !needs_grad {
            return Tensor::constant(data);
        }
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data: standardize(data),
            parents,
            backward: Some(Box::new(backward)),
            param: None,
            needs_grad: true,
        }))
    }

    /// Cut the graph: same data, no history.
    pub fn detach(&self) -> Self {
        Tensor::constant(self.data().clone())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    pub fn param_id(&self) -> Option<ParamId> {
        self.0.param
    }

    pub fn data(&self) -> &ArrayD<T> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn node(&self) -> &Node<T> {
        &self.0
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.0.data.len(), 1, "item() on non-scalar tensor");
        *self.0.data.iter().next().unwrap()
    }

    /// (N, C, H, W) of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let s = self.shape();
        assert_eq!(s.len(), 4, "expected rank-4 tensor, got shape {s:?}");
        (s[0], s[1], s[2], s[3])
    }
}

/// Gradients produced by [`backward`], keyed by node id.
pub struct GradStore<T: Element> {
    grads: HashMap<u64, ArrayD<T>>,
}

impl<T: Element> GradStore<T> {
    /// Gradient with respect to a leaf or retained node, if any was produced.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&ArrayD<T>> {
        self.grads.get(&t.id())
    }

    pub fn take(&mut self, t: &Tensor<T>) -> Option<ArrayD<T>> {
        self.grads.remove(&t.id())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode sweep from `root` (gradient seeded with ones).
///
/// Gradients for interior nodes are freed as soon as they have been
/// propagated; only leaves keep their entries in the returned store.
pub fn backward<T: Element>(root: &Tensor<T>) -> GradStore<T> {
    let mut grads: HashMap<u64, ArrayD<T>> = HashMap::new();
    if !root.needs_grad() {
        return GradStore { grads };
    }

    // Post-order DFS: every node appears after all of its parents.
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.0.parents.iter() {
            if p.0.needs_grad && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    grads.insert(root.id(), ArrayD::ones(root.shape()));

    for t in order.iter().rev() {
        let node = &t.0;
        let Some(back) = node.backward.as_ref() else {
            continue; // leaf: keep its accumulated gradient
        };
        // Interior node: consume its gradient.
        let Some(g) = grads.remove(&node.id) else {
            continue; // unreachable from root along grad-requiring edges
        };
        let contributions = back(node, &g);
        debug_assert_eq!(contributions.len(), node.parents.len());
        for (parent, contrib) in node.parents.iter().zip(contributions) {
            let Some(c) = contrib else { continue };
            if !parent.0.needs_grad {
                continue;
            }
            debug_assert_eq!(
                c.shape(),
                parent.shape(),
                "gradient shape mismatch for parent of node {}",
                node.id
            );
            match grads.entry(parent.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    *e.get_mut() += &c;
                }
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(c);
                }
            }
        }
    }

    GradStore { grads }
}
