//! Tape-based reverse-mode differentiation over `f64` n-d arrays.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! node keeps its value and, when gradients are enabled, a closure mapping the
//! upstream gradient to gradients of its parents. Ops are coarse (whole
//! convolutions, whole selective scans) so the tape stays short.

mod nn;
pub(crate) mod ops;

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(IxDyn(shape)))
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        Self::new(name, Tensor::from_elem(IxDyn(shape), v))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(name, Tensor::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything owning [`Param`]s. Visit order must be deterministic.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

/// Switches that replace parts of the forward computation. Used to pin
/// sub-blocks to identity behaviour when testing compositions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardHooks {
    /// Selective scans return their input sequence unchanged.
    pub s6_passthrough: bool,
    /// Spatial and channel attention fields are replaced by ones.
    pub unit_attention: bool,
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: BTreeMap<String, Var>,
    pub hooks: ForwardHooks,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: BTreeMap::new(),
            hooks: ForwardHooks::default(),
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_hooks(mut self, hooks: ForwardHooks) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A leaf whose gradient is collected.
    pub fn input(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Binds a parameter as a leaf. Binding the same name twice returns the
    /// same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.input(p.value.clone());
        self.params.insert(p.name.clone(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        self.push(Node {
            value,
            parents: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    /// Reverse sweep seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_node = &self.nodes[root.0];
        grads[root.0] = Some(Tensor::ones(root_node.value.raw_dim()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Leaves keep their gradient; interior nodes don't need it anymore.
            grads[idx] = None;
        }

        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Parameter gradients in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params
            .iter()
            .map(|(name, &v)| (name.as_str(), self.wrt(v)))
    }
}
