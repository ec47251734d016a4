//! Adaptive-moment optimizer with decoupled weight decay.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let decay = T::from_f64_lossy(1.0 - lr * self.weight_decay);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((p, m), v), &g) in pd.iter_mut().zip(md).zip(vd).zip(g.data()) {
                *m = b1t * *m + (one - b1t) * g;
                *v = b2t * *v + (one - b2t) * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *p = *p * decay - step_size * *m / denom;
            }
        }
    }

    /// Moment arrays keyed by parameter name, plus the step counter.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "optim.step".to_string(),
            Tensor::scalar(T::from_f64_lossy(self.step as f64)),
        )];
        for (id, name, _) in store.iter() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (self.m.get(i), self.v.get(i)) {
                out.push((format!("optim.m.{name}"), m.clone()));
                out.push((format!("optim.v.{name}"), v.clone()));
            }
        }
        out
    }

    /// Restores state written by [`AdamW::export`]; missing entries start at zero.
    pub fn import<'a>(
        &mut self,
        store: &ParamStore<T>,
        arrays: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<()> {
        self.m = vec![None; store.len()];
        self.v = vec![None; store.len()];
        self.step = 0;
        for (name, t) in arrays {
            if name == "optim.step" {
                self.step = t.item().to_f64_lossy() as u64;
                continue;
            }
            let (slot, pname) = if let Some(p) = name.strip_prefix("optim.m.") {
                (&mut self.m, p)
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                (&mut self.v, p)
            } else {
                continue;
            };
            let id = store
                .id(pname)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {pname}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Format(format!("optimizer state shape mismatch for {pname}")));
            }
            slot[id.index()] = Some(t.clone());
        }
        Ok(())
    }
}

/// Collects trainable parameter gradients and rescales them so their global
/// L2 norm is at most `max_norm` (no-op when `max_norm` is 0). Returns the
/// norm before clipping.
pub fn collect_and_clip<T: Scalar>(
    store: &ParamStore<T>,
    mut grads: Gradients<T>,
    max_norm: f64,
) -> (Vec<(ParamId, Tensor<T>)>, f64) {
    let mut out: Vec<(ParamId, Tensor<T>)> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .filter_map(|id| grads.take_param(id).map(|g| (id, g)))
        .collect();
    let norm = out
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / (norm + 1e-12));
        for (_, g) in &mut out {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    (out, norm)
}
