use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Float, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// A differentiable operation recorded on the graph.
///
/// `backward` must itself be written in terms of [`Var`] operations so that
/// the gradients it returns can be differentiated again.
pub(crate) trait Op<T: Float> {
    fn backward(
        &self,
        inputs: &[Var<T>],
        out: &Var<T>,
        grad: &Var<T>,
        needs: &[bool],
    ) -> Vec<Option<Var<T>>>;
}

struct Node<T: Float> {
    id: u64,
    value: Tensor<T>,
    parents: Vec<Var<T>>,
    op: Option<Rc<dyn Op<T>>>,
    requires_grad: bool,
}

/// Handle to a value on the autodiff graph.
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, op: Rc<dyn Op<T>>) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if !track {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents,
            op: Some(op),
            requires_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Leaf copy of this value that gradients can be taken with respect to.
    pub fn detach_param(&self) -> Self {
        Self::param(self.0.value.clone())
    }
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// Inputs the output does not depend on receive zeros. With `create_graph`
/// the returned gradients are themselves on the graph and can be
/// differentiated again.
pub fn grad<T: Float>(output: &Var<T>, inputs: &[Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(output.len(), 1, "grad requires a scalar output");
    let zeros = || {
        inputs
            .iter()
            .map(|v| Var::constant(Tensor::zeros(v.shape())))
            .collect::<Vec<_>>()
    };
    if !output.requires_grad() {
        return zeros();
    }

    // Iterative post-order DFS gives parents before children.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut visited: HashMap<u64, usize> = HashMap::new();
    let mut stack: Vec<(Var<T>, usize)> = vec![(output.clone(), 0)];
    let mut on_stack: std::collections::HashSet<u64> = std::collections::HashSet::new();
    on_stack.insert(output.id());
    while let Some((node, child)) = stack.pop() {
        if child < node.0.parents.len() {
            let parent = node.0.parents[child].clone();
            stack.push((node, child + 1));
            if parent.requires_grad()
                && !visited.contains_key(&parent.id())
                && !on_stack.contains(&parent.id())
            {
                on_stack.insert(parent.id());
                stack.push((parent, 0));
            }
        } else {
            visited.insert(node.id(), order.len());
            order.push(node);
        }
    }

    let input_ids: std::collections::HashSet<u64> = inputs.iter().map(|v| v.id()).collect();
    let mut needed = vec![false; order.len()];
    for (i, node) in order.iter().enumerate() {
        needed[i] = input_ids.contains(&node.id())
            || node
                .0
                .parents
                .iter()
                .any(|p| visited.get(&p.id()).is_some_and(|&j| needed[j]));
    }
    if !needed[order.len() - 1] {
        return zeros();
    }

    let _guard = (!create_graph).then(no_grad);
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(
        output.id(),
        Var::constant(Tensor::ones(output.shape())),
    );
    for (i, node) in order.iter().enumerate().rev() {
        if !needed[i] {
            continue;
        }
        let Some(op) = node.0.op.as_ref() else {
            continue;
        };
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let needs: Vec<bool> = node
            .0
            .parents
            .iter()
            .map(|p| visited.get(&p.id()).is_some_and(|&j| needed[j]))
            .collect();
        let parent_grads = op.backward(&node.0.parents, node, &g, &needs);
        for ((parent, pg), need) in node.0.parents.iter().zip(parent_grads).zip(needs) {
            let (Some(pg), true) = (pg, need) else {
                continue;
            };
            debug_assert_eq!(pg.shape(), parent.shape());
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }
    inputs
        .iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}
