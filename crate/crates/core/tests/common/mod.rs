//! Shared oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniuir::autograd::{Graph, Var};
use uniuir::nn::{ParamId, ParamStore};
use uniuir::Tensor;

pub mod criteria;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged on an absolute 1e-8 scale.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut rng(seed))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut rng(seed))
}

#[derive(Debug)]
pub struct FdReport {
    pub worst_rel: f64,
    pub worst_at: String,
    pub checked: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.worst_rel <= FD_REL_TOL
    }
}

fn projected_loss(store: &ParamStore<f64>, f: &dyn Fn(&mut Graph<'_, f64>) -> Var, proj: &mut Option<Tensor<f64>>) -> f64 {
    let mut g = Graph::inference(store);
    let out = f(&mut g);
    let v = g.value(out);
    let w = proj.get_or_insert_with(|| uniform(v.shape(), -1.0, 1.0, 99));
    v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Central-difference check of `Σ w ⊙ f(params)` for a fixed random `w`.
///
/// Up to `probes` entries of each parameter in `ids` are perturbed.
pub fn fd_check(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    probes: usize,
    f: impl Fn(&mut Graph<'_, f64>) -> Var,
) -> FdReport {
    let mut proj = None;
    projected_loss(store, &f, &mut proj);
    let proj_t = proj.clone().unwrap();
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let w = g.constant(proj_t.clone());
        let prod = g.mul(out, w);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        ids.iter()
            .map(|&id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    };
    let mut pick = rng(7);
    let mut report = FdReport { worst_rel: 0.0, worst_at: String::new(), checked: 0 };
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).len();
        let idxs: Vec<usize> = if n <= probes { (0..n).collect() } else { (0..probes).map(|_| pick.random_range(0..n)).collect() };
        for i in idxs {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let lp = projected_loss(store, &f, &mut proj);
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let lm = projected_loss(store, &f, &mut proj);
            store.get_mut(id).data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * FD_STEP);
            let ana = analytic[k].data()[i];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(FD_FLOOR);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_at = format!("{}[{i}]: analytic {ana:.6e} numeric {num:.6e}", store.name(id));
            }
        }
    }
    report
}

/// A store holding the given tensors as parameters `x0, x1, ...`.
pub fn store_of(inputs: Vec<Tensor<f64>>) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = inputs.into_iter().enumerate().map(|(i, t)| store.insert(&format!("x{i}"), t)).collect();
    (store, ids)
}

/// Checks every input of a free function.
pub fn fd_check_fn(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var) -> FdReport {
    let (mut store, ids) = store_of(inputs);
    let ids2 = ids.clone();
    fd_check(&mut store, &ids, 64, move |g| {
        let vars: Vec<Var> = ids2.iter().map(|&id| g.param(id)).collect();
        f(g, &vars)
    })
}

pub fn assert_fd(report: FdReport, what: &str) {
    assert!(report.passed(), "{what}: worst rel err {:.3e} at {} ({} probes)", report.worst_rel, report.worst_at, report.checked);
}
