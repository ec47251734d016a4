//! Latent conditional diffusion over the prior vector.
//!
//! Linear `α` schedule, ε-predicting denoiser `ε_θ(Z_t, C, t)` and the
//! ancestral reverse update
//!
//! ```text
//! Z_{t−1} = (Z_t − (1−α_t)/sqrt(1−ᾱ_t) · ε_θ) / sqrt(α_t) + sqrt(1−α_t) · η
//! ```
//!
//! with `η = 0` on the last step.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::image::{PriorKind, PriorVector};
use crate::nn::{Builder, Linear, ParamStore};
use crate::rng::DeterministicRng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f64 = 0.2;
const TIME_EMBED_BASE: f64 = 10_000.0;

/// `alpha[t-1]`, `beta[t-1]`, `alpha_bar[t-1]` hold step `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("t must lie in 1..={}, got {t}", self.steps())));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

pub fn make_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let t = cfg.diffusion_steps;
    if t < 1 {
        return Err(Error::InvalidConfig("diffusion_steps must be >= 1".into()));
    }
    if !(0.0 < cfg.alpha_t && cfg.alpha_t < cfg.alpha_1 && cfg.alpha_1 < 1.0) && t > 1 {
        return Err(Error::InvalidConfig("need 0 < alpha_T < alpha_1 < 1".into()));
    }
    let alpha: Vec<f64> = if t == 1 {
        vec![cfg.alpha_1]
    } else {
        (0..t)
            .map(|i| {
                let f = i as f64 / (t - 1) as f64;
                cfg.alpha_1 * (1.0 - f) + cfg.alpha_t * f
            })
            .collect()
    };
    let beta = alpha.iter().map(|a| 1.0 - a).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { alpha, beta, alpha_bar })
}

/// Sinusoidal embedding of step `t`: `sin` in the first half, `cos` in the second.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    (0..dim)
        .map(|i| {
            let j = if i < half { i } else { i - half };
            let freq = TIME_EMBED_BASE.powf(-(j as f64) / half.max(1) as f64);
            let arg = t as f64 * freq;
            lit(if i < half { arg.sin() } else { arg.cos() })
        })
        .collect()
}

/// MLP `[Z_t, C, emb(t)] (3Ĉ) → 2Ĉ → 2Ĉ → Ĉ` predicting ε.
#[derive(Debug)]
pub struct Denoiser {
    pub dim: usize,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    evals: AtomicUsize,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            l1: self.l1.clone(),
            l2: self.l2.clone(),
            l3: self.l3.clone(),
            evals: AtomicUsize::new(self.evaluations()),
        }
    }
}

impl Denoiser {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, dim: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            dim,
            l1: Linear::new(&mut b, "l1", 3 * dim, 2 * dim, true),
            l2: Linear::new(&mut b, "l2", 2 * dim, 2 * dim, true),
            l3: Linear::new(&mut b, "l3", 2 * dim, dim, true),
            evals: AtomicUsize::new(0),
        }
    }

    /// Number of forward evaluations so far.
    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    /// `ε_θ` for `z_t, c: [B, Ĉ]` at step `t` (shared across the batch).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z_t: Var, c: Var, t: usize) -> Var {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let b = g.shape(z_t)[0];
        let emb = time_embedding::<T>(t, self.dim);
        let emb = g.constant(Tensor::from_fn(&[b, self.dim], |i| emb[i % self.dim]));
        let x = g.concat_last(&[z_t, c, emb]);
        let h = self.l1.forward(g, x);
        let h = g.leaky_relu(h, lit(LRELU_SLOPE));
        let h = self.l2.forward(g, h);
        let h = g.leaky_relu(h, lit(LRELU_SLOPE));
        self.l3.forward(g, h)
    }
}

/// `sqrt(ᾱ_t) Z + sqrt(1 − ᾱ_t) ε` on a graph.
pub fn q_sample_graph<T: Scalar>(g: &mut Graph<'_, T>, z: Var, t: usize, eps: Var, s: &NoiseSchedule) -> Var {
    let ab = s.alpha_bar(t);
    let a = g.scale(z, lit(ab.sqrt()));
    let b = g.scale(eps, lit((1.0 - ab).sqrt()));
    g.add(a, b)
}

/// One reverse update given the predicted noise `eps_pred`.
pub fn reverse_update<T: Scalar>(
    g: &mut Graph<'_, T>,
    z_t: Var,
    eps_pred: Var,
    t: usize,
    s: &NoiseSchedule,
    noise: Option<Var>,
) -> Var {
    let (a, ab) = (s.alpha(t), s.alpha_bar(t));
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    let e = g.scale(eps_pred, lit(coef));
    let d = g.sub(z_t, e);
    let mean = g.scale(d, lit(1.0 / a.sqrt()));
    match noise {
        Some(n) if t > 1 => {
            let n = g.scale(n, lit((1.0 - a).sqrt()));
            g.add(mean, n)
        }
        _ => mean,
    }
}

/// Runs the reverse chain from `z_start` at step `T` down to `Ẑ`.
pub fn reverse_chain<T: Scalar>(
    g: &mut Graph<'_, T>,
    den: &Denoiser,
    z_start: Var,
    c: Var,
    s: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Var {
    let b = g.shape(z_start)[0];
    let mut z = z_start;
    for t in (1..=s.steps()).rev() {
        let eps = den.forward(g, z, c, t);
        let noise = (t > 1).then(|| {
            let n = Tensor::randn(&[b, den.dim], 1.0, rng);
            g.constant(n)
        });
        z = reverse_update(g, z, eps, t, s, noise);
    }
    z
}

pub fn q_sample<T: Scalar>(z: &PriorVector<T>, t: usize, eps: &[T], s: &NoiseSchedule) -> Result<PriorVector<T>> {
    s.check_t(t)?;
    if eps.len() != z.len() {
        return Err(invalid("noise length differs from prior length"));
    }
    let ab = s.alpha_bar(t);
    let (ca, cb): (T, T) = (lit(ab.sqrt()), lit((1.0 - ab).sqrt()));
    let v = z.values().iter().zip(eps).map(|(&z, &e)| ca * z + cb * e).collect();
    PriorVector::new(v, PriorKind::Noisy)
}

/// One reverse step with the learned denoiser; `noise` is ignored at `t = 1`.
pub fn reverse_step<T: Scalar>(
    store: &ParamStore<T>,
    den: &Denoiser,
    z_t: &PriorVector<T>,
    t: usize,
    c: &PriorVector<T>,
    s: &NoiseSchedule,
    noise: Option<&[T]>,
) -> Result<PriorVector<T>> {
    s.check_t(t)?;
    let mut g = Graph::inference(store);
    let zv = g.constant(Tensor::new(vec![1, z_t.len()], z_t.values().to_vec())?);
    let cv = g.constant(Tensor::new(vec![1, c.len()], c.values().to_vec())?);
    let eps = den.forward(&mut g, zv, cv, t);
    let n = match noise {
        Some(n) => Some(g.constant(Tensor::new(vec![1, n.len()], n.to_vec())?)),
        None => None,
    };
    let out = reverse_update(&mut g, zv, eps, t, s, n);
    PriorVector::new(g.value(out).data().to_vec(), PriorKind::Noisy)
}

/// `Ẑ` from `Z_T ~ N(0, I)` after `T` reverse steps.
pub fn sample<T: Scalar>(
    store: &ParamStore<T>,
    den: &Denoiser,
    c: &PriorVector<T>,
    s: &NoiseSchedule,
    rng: &mut DeterministicRng,
) -> Result<PriorVector<T>> {
    let mut g = Graph::inference(store);
    let cv = g.constant(Tensor::new(vec![1, c.len()], c.values().to_vec())?);
    let z0 = g.constant(Tensor::randn(&[1, c.len()], 1.0, rng));
    let z = reverse_chain(&mut g, den, z0, cv, s, rng);
    PriorVector::new(g.value(z).data().to_vec(), PriorKind::Denoised)
}
