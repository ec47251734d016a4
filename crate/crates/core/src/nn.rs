//! Named parameter storage and the small layer types every model uses.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Flat, insertion-ordered map from dotted names to parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Sets trainability of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn num_scalars_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces values from `(name, tensor)` pairs; every stored name must
    /// be present with the same shape.
    pub fn load_from<'a>(&mut self, arrays: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in arrays {
            let Some(&i) = self.by_name.get(name) else {
                continue;
            };
            if self.entries[i].value.shape() != t.shape() {
                return Err(invalid(format!(
                    "parameter {name}: stored shape {:?}, found {:?}",
                    self.entries[i].value.shape(),
                    t.shape()
                )));
            }
            self.entries[i].value = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("parameter {} missing", self.entries[i].name)));
        }
        Ok(())
    }
}

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
}

/// Allocates parameters under a dotted prefix.
pub struct Builder<'a, T, R: Rng + ?Sized> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng + ?Sized> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: impl AsRef<str>) -> Builder<'_, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, T::from_f64_lossy(v)),
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::rand_uniform(shape, -bound, bound, self.rng)
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.insert(&full, value)
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Overwrites an already allocated parameter.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        let slot = self.store.get_mut(id);
        assert_eq!(slot.shape(), value.shape(), "parameter shape");
        *slot = value;
    }
}

/// 2-D convolution layer (dense or depthwise) with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub depthwise: bool,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.sub(name);
        let fan_in = cin * kernel * kernel;
        let weight = b.param("weight", &[kernel, kernel, cin, cout], Init::FanIn(fan_in));
        let bias = bias.then(|| b.param("bias", &[cout], Init::FanIn(fan_in)));
        Self { weight, bias, cin, cout, kernel, stride, depthwise: false }
    }

    pub fn depthwise<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.sub(name);
        let fan_in = kernel * kernel;
        let weight = b.param("weight", &[kernel, kernel, 1, channels], Init::FanIn(fan_in));
        let bias = bias.then(|| b.param("bias", &[channels], Init::FanIn(fan_in)));
        Self {
            weight,
            bias,
            cin: channels,
            cout: channels,
            kernel,
            stride: 1,
            depthwise: true,
        }
    }

    /// Zeroes weight and bias (residual branches that start as identity).
    pub fn zero_init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.kernel / 2, self.depthwise)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.sub(name);
        let weight = b.param("weight", &[din, dout], Init::FanIn(din));
        let bias = bias.then(|| b.param("bias", &[dout], Init::FanIn(din)));
        Self { weight, bias, din, dout }
    }

    /// Explicit initializers for weight and bias.
    pub fn with_init<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        din: usize,
        dout: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Self {
        let mut b = b.sub(name);
        let weight = b.param("weight", &[din, dout], weight_init);
        let bias = bias_init.map(|init| b.param("bias", &[dout], init));
        Self { weight, bias, din, dout }
    }

    pub fn zero_init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Layer norm over the channel (last) axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, dim: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            gamma: b.param("gamma", &[dim], Init::Constant(1.0)),
            beta: b.param("beta", &[dim], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, Self::EPS)
    }
}

pub(crate) fn zero_param<T: Scalar>(store: &mut ParamStore<T>, id: ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
}
