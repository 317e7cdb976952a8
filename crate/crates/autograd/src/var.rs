use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::ops::Op;
use crate::{Float, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static KINKS: RefCell<Option<u64>> = const { RefCell::new(None) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous recording mode on drop.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

fn set_grad_enabled(on: bool) -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(on));
    NoGradGuard { prev }
}

/// Disables graph recording until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    set_grad_enabled(false)
}

/// Runs `f` while hashing the sign pattern of every piecewise-linear
/// activation input it evaluates. Two evaluations with equal signatures lie in
/// the same linear region, which is what finite-difference checks need.
pub fn kink_signature<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = KINKS.with(|k| k.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let sig = KINKS
        .with(|k| std::mem::replace(&mut *k.borrow_mut(), prev))
        .unwrap_or(0);
    (out, sig)
}

pub(crate) fn record_kinks<T: Float>(x: &Tensor<T>) {
    KINKS.with(|k| {
        if let Some(h) = k.borrow_mut().as_mut() {
            for v in x.data() {
                let bit = if *v > T::zero() { 0x9e37u64 } else { 0x7f4au64 };
                *h = (*h ^ bit).wrapping_mul(0x0100_0000_01b3);
            }
        }
    });
}

pub(crate) struct Node<T: Float> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) parents: Vec<Var<T>>,
    pub(crate) requires_grad: bool,
}

/// A tensor value plus the op that produced it.
pub struct Var<T: Float>(pub(crate) Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.0.requires_grad)
    }
}

impl<T: Float> Var<T> {
    /// A trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        }))
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor<T>, op: Op<T>, parents: Vec<Var<T>>) -> Self {
        let requires_grad = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Var(Rc::new(Node {
                value,
                op,
                parents,
                requires_grad,
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
///
/// Inputs that do not influence the output get zeros. With `create_graph`
/// the returned gradients are themselves differentiable.
pub fn grad<T: Float>(output: &Var<T>, inputs: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(
        output.value().numel(),
        1,
        "grad() needs a scalar output, got {:?}",
        output.shape()
    );
    let seed = Var::constant(Tensor::ones(output.shape()));
    grad_with_seed(output, seed, inputs, create_graph)
}

/// Vector-Jacobian product: gradients of `<output, seed>`.
pub fn grad_with_seed<T: Float>(output: &Var<T>, seed: Var<T>, inputs: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(seed.shape(), output.shape(), "seed shape must match output");
    let _mode = set_grad_enabled(create_graph);

    let input_keys: HashMap<*const Node<T>, usize> = inputs.iter().enumerate().map(|(i, v)| (v.key(), i)).collect();

    // Iterative post-order DFS; `relevant` marks nodes with a path to an input.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut relevant: HashMap<*const Node<T>, bool> = HashMap::new();
    let mut stack: Vec<(Var<T>, bool)> = Vec::new();
    if output.requires_grad() {
        stack.push((output.clone(), false));
    }
    while let Some((node, expanded)) = stack.pop() {
        let key = node.key();
        if expanded {
            let rel = input_keys.contains_key(&key)
                || node
                    .0
                    .parents
                    .iter()
                    .any(|p| relevant.get(&p.key()).copied().unwrap_or(false));
            relevant.insert(key, rel);
            order.push(node);
            continue;
        }
        if relevant.contains_key(&key) {
            continue;
        }
        // placeholder so a node reachable twice is expanded once
        relevant.insert(key, false);
        stack.push((node.clone(), true));
        for p in node.0.parents.iter() {
            if p.requires_grad() && !relevant.contains_key(&p.key()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut grads: HashMap<*const Node<T>, Var<T>> = HashMap::new();
    let mut results: Vec<Option<Var<T>>> = vec![None; inputs.len()];
    if output.requires_grad() {
        grads.insert(output.key(), seed);
    }
    for node in order.iter().rev() {
        let key = node.key();
        if !relevant.get(&key).copied().unwrap_or(false) {
            continue;
        }
        let Some(g) = grads.remove(&key) else {
            continue;
        };
        if let Some(&i) = input_keys.get(&key) {
            results[i] = Some(g.clone());
        }
        if node.is_leaf() {
            continue;
        }
        let parent_grads = crate::ops::backward(node, &g);
        for (p, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !p.requires_grad() || !relevant.get(&p.key()).copied().unwrap_or(false) {
                continue;
            }
            match grads.remove(&p.key()) {
                Some(prev) => {
                    grads.insert(p.key(), prev.add(&pg));
                }
                None => {
                    grads.insert(p.key(), pg);
                }
            }
        }
    }

    results
        .into_iter()
        .zip(inputs)
        .map(|(g, v)| g.unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape()))))
        .collect()
}
