//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with a backward closure. Parameters are borrowed from a [`ParamStore`]
//! without copying; gradients for trainable ones are read back from the
//! [`Gradients`] returned by [`Graph::backward`].

mod conv;
pub use conv::{conv_macs, ConvGeom};
pub(crate) mod elementwise;
pub(crate) mod layers;
mod scan;
pub(crate) mod shape;
pub(crate) mod spectral;

use std::borrow::Cow;

pub use scan::ScanOrder;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub out: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

impl<T> BackwardCtx<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<'s, T: Scalar> {
    value: Cow<'s, Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

pub struct Graph<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<'s, T>>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A recording graph; trainable parameters of `store` receive gradients.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            bound: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// Evaluation only: no backward closures are kept.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    /// A graph with no parameter store, for differentiating free functions.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: Vec::new(),
            grad_enabled: true,
        }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    /// A leaf that gradients are propagated to (when recording).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs = self.grad_enabled;
        self.push_leaf(Cow::Owned(t), needs)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let needs = self.grad_enabled && store.is_trainable(id);
        let v = self.push_leaf(Cow::Borrowed(store.get(id)), needs);
        self.bound[id.index()] = Some(v);
        v
    }

    fn push_leaf(&mut self, value: Cow<'s, Tensor<T>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation result. `backward` is only built when some
    /// parent needs a gradient.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let (parents, backward) = if needs_grad {
            (parents.iter().map(|p| p.0).collect(), Some(backward()))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            parents,
            backward,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_with(loss, Tensor::ones(self.shape(loss)))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &*self.nodes[p].value).collect(),
                out: &node.value,
                grad: &g,
                needs: node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }
}

/// Result of a backward pass. Only leaf gradients survive.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.of(v))
    }

    pub fn take_param(&mut self, id: ParamId) -> Option<Tensor<T>> {
        let v = self.bound.get(id.index()).copied().flatten()?;
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Sums `grad` down to `shape` (the reverse of numpy-style broadcasting
/// where `shape` has the same rank and unit axes are broadcast).
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    if shape.iter().product::<usize>() == 1 {
        return Tensor::from_parts(shape.to_vec(), vec![grad.sum()]);
    }
    let gshape = grad.shape();
    debug_assert_eq!(gshape.len(), shape.len());
    let out_strides = crate::tensor::strides(shape);
    let eff: Vec<usize> = shape
        .iter()
        .zip(&out_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = vec![T::zero(); shape.iter().product()];
    let rank = gshape.len();
    let last = gshape[rank - 1];
    let last_stride = eff[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    for chunk in grad.data().chunks(last) {
        let base: usize = idx.iter().zip(&eff).map(|(&i, &s)| i * s).sum();
        if last_stride == 0 {
            let s: T = chunk.iter().copied().sum();
            out[base] += s;
        } else {
            for (j, &v) in chunk.iter().enumerate() {
                out[base + j] += v;
            }
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < gshape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
