use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether new operations record their inputs for differentiation.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    previous: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let previous = GRAD_ENABLED.with(|g| g.replace(enabled));
        Self { previous }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

/// Runs `f` without recording a graph. Results are constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

/// Arguments handed to an operation's backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Var],
    /// Gradient of the objective with respect to the operation's output.
    pub grad: &'a Var,
    /// `needs[i]` is false when no requested gradient depends on input `i`.
    pub needs: &'a [bool],
}

type BackwardFn = dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Var>>;

struct GradFn {
    name: &'static str,
    inputs: Vec<Var>,
    backward: Box<BackwardFn>,
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A node in the computation graph: a tensor value plus, when it was produced
/// by a differentiable operation, the rule to propagate gradients to its inputs.
///
/// Backward rules are themselves written with `Var` operations, so gradients
/// computed with `create_graph = true` can be differentiated again.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    fn with_node(value: Tensor, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A trainable leaf.
    pub fn param(value: Tensor) -> Self {
        Self::with_node(value, true, None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::with_node(value, false, None)
    }

    /// Records an operation. The backward rule is dropped when no input
    /// requires a gradient or grad mode is off.
    pub fn from_op<F>(value: Tensor, name: &'static str, inputs: Vec<Var>, backward: F) -> Self
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Var>> + 'static,
    {
        let requires_grad = is_grad_enabled() && inputs.iter().any(Var::requires_grad);
        if requires_grad {
            let grad_fn = GradFn { name, inputs, backward: Box::new(backward) };
            Self::with_node(value, true, Some(grad_fn))
        } else {
            Self::with_node(value, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the producing operation, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    fn inputs(&self) -> &[Var] {
        self.0.grad_fn.as_ref().map_or(&[], |g| g.inputs.as_slice())
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

/// Names of the operations recorded in the graph behind `output`, each
/// node visited once, in no particular order.
pub fn graph_ops(output: &Var) -> Vec<&'static str> {
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![output.clone()];
    let mut names = Vec::new();
    while let Some(v) = stack.pop() {
        if !seen.insert(v.id()) {
            continue;
        }
        if let Some(name) = v.op_name() {
            names.push(name);
        }
        stack.extend(v.inputs().iter().cloned());
    }
    names
}

/// Gradients of `output` (seeded with ones, i.e. of `sum(output)`) with
/// respect to each of `wrt`. Unreachable inputs get zero gradients.
///
/// With `create_graph` the returned gradients are themselves differentiable.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    let _guard = GradModeGuard::new(create_graph);
    let targets: HashSet<usize> = wrt.iter().map(Var::id).collect();

    // Post-order over nodes that require grad; `relevant` marks nodes with a
    // path to some requested input.
    let mut order: Vec<Var> = Vec::new();
    let mut relevant: HashSet<usize> = HashSet::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Var, usize)> = Vec::new();
    if output.requires_grad() {
        visited.insert(output.id());
        stack.push((output.clone(), 0));
    }
    while let Some((node, child)) = stack.pop() {
        let inputs = node.inputs();
        if child < inputs.len() {
            let next = inputs[child].clone();
            stack.push((node, child + 1));
            if next.requires_grad() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            if targets.contains(&node.id()) || inputs.iter().any(|i| relevant.contains(&i.id())) {
                relevant.insert(node.id());
            }
            order.push(node);
        }
    }

    let mut grads: HashMap<usize, Var> = HashMap::new();
    let mut results: HashMap<usize, Var> = HashMap::new();
    if relevant.contains(&output.id()) {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    }
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if targets.contains(&node.id()) {
            results.insert(node.id(), g.clone());
        }
        let Some(grad_fn) = node.0.grad_fn.as_ref() else { continue };
        let needs: Vec<bool> = grad_fn.inputs.iter().map(|i| relevant.contains(&i.id())).collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let ctx = BackwardCtx { inputs: &grad_fn.inputs, grad: &g, needs: &needs };
        let input_grads = (grad_fn.backward)(&ctx);
        debug_assert_eq!(input_grads.len(), grad_fn.inputs.len(), "{}", grad_fn.name);
        for ((input, gi), need) in grad_fn.inputs.iter().zip(input_grads).zip(&needs) {
            let (Some(gi), true) = (gi, *need) else { continue };
            assert_eq!(
                gi.shape(),
                input.shape(),
                "backward of `{}` produced a gradient of the wrong shape",
                grad_fn.name
            );
            let merged = match grads.remove(&input.id()) {
                Some(prev) => crate::ops::add(&prev, &gi),
                None => gi,
            };
            grads.insert(input.id(), merged);
        }
    }

    wrt.iter()
        .map(|v| {
            results
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

/// First-order gradients as plain tensors.
pub fn grad_values(output: &Var, wrt: &[Var]) -> Vec<Tensor> {
    grad(output, wrt, false).into_iter().map(|g| g.value().clone()).collect()
}
