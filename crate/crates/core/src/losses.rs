//! Training objectives.
//!
//! Stage I: `L1(x_hq, x_gt) + λ1 · (L1(D_pseudo, D_hq) + λ2 · L_grad)`.
//! Stage II: `L1(x_hq, x_gt) + L1(Z, Ẑ)`, plus an optional ε-matching term.
//! Every reduction is a mean; `L_grad` uses forward differences and skips an
//! axis of length 1.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{invalid, Result};
use crate::image::{DepthRaster, ImagePlane};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const L1: &str = "l1";
pub const DEPTH_L1: &str = "depth_l1";
pub const DEPTH_GRAD: &str = "depth_grad";
pub const DIFF: &str = "diff";
pub const EPS: &str = "eps";

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: f64,
    pub weight: f64,
}

/// Loss components with the weights they enter the total with.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn new(terms: Vec<LossTerm>) -> Self {
        let total = recompose(&terms);
        Self { terms, total }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.terms.iter().map(|t| t.name).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.iter().all(|t| t.value.is_finite())
    }

    /// Component values as CSV fields, in term order.
    pub fn csv_fields(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{:e}", t.value);
        }
        s
    }
}

/// `Σ weight · value` in term order.
pub fn recompose(terms: &[LossTerm]) -> f64 {
    terms.iter().fold(0.0, |acc, t| acc + t.weight * t.value)
}

pub fn stage1_report(l1: f64, depth_l1: f64, depth_grad: f64, lambda1: f64, lambda2: f64) -> LossReport {
    LossReport::new(vec![
        LossTerm { name: L1, value: l1, weight: 1.0 },
        LossTerm { name: DEPTH_L1, value: depth_l1, weight: lambda1 },
        LossTerm { name: DEPTH_GRAD, value: depth_grad, weight: lambda1 * lambda2 },
    ])
}

pub fn stage2_report(l1: f64, diff: f64, eps: f64, eps_weight: f64) -> LossReport {
    LossReport::new(vec![
        LossTerm { name: L1, value: l1, weight: 1.0 },
        LossTerm { name: DIFF, value: diff, weight: 1.0 },
        LossTerm { name: EPS, value: eps, weight: eps_weight },
    ])
}

/// `mean |a − b|`.
pub fn l1_graph<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// `mean (a − b)²`.
pub fn mse_graph<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.square(d);
    g.mean(d)
}

/// `mean |∂x e| + mean |∂y e|` for `e = a − b`, both `[B, H, W, C]`.
pub fn grad_graph<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Var {
    let e = g.sub(a, b);
    let s = g.shape(e).to_vec();
    let mut parts = Vec::with_capacity(2);
    for (axis, len) in [(2, s[2]), (1, s[1])] {
        if len > 1 {
            let d = g.forward_diff(e, axis);
            let d = g.abs(d);
            parts.push(g.mean(d));
        }
    }
    if parts.is_empty() {
        return g.scalar(T::zero());
    }
    g.add_n(&parts)
}

/// Graph of the stage I objective and its report.
pub fn stage1_objective<T: Scalar>(
    g: &mut Graph<'_, T>,
    x_hq: Var,
    x_gt: Var,
    d_pseudo: Var,
    d_hq: Var,
    cfg: &RunConfig,
) -> (Var, LossReport) {
    let l1 = l1_graph(g, x_hq, x_gt);
    let dl1 = l1_graph(g, d_pseudo, d_hq);
    let dgr = grad_graph(g, d_pseudo, d_hq);
    let depth = {
        let w = g.scale(dgr, lit(cfg.lambda2));
        g.add(dl1, w)
    };
    let depth = g.scale(depth, lit(cfg.lambda1));
    let total = g.add(l1, depth);
    let v = |g: &Graph<'_, T>, x: Var| g.value(x).item().to_f64_lossy();
    let report = stage1_report(v(g, l1), v(g, dl1), v(g, dgr), cfg.lambda1, cfg.lambda2);
    (total, report)
}

/// Graph of the stage II objective. `eps` pairs the predicted and injected
/// noise when ε-matching is on.
pub fn stage2_objective<T: Scalar>(
    g: &mut Graph<'_, T>,
    x_hq: Var,
    x_gt: Var,
    z: Var,
    z_hat: Var,
    eps: Option<(Var, Var)>,
    cfg: &RunConfig,
) -> (Var, LossReport) {
    let l1 = l1_graph(g, x_hq, x_gt);
    let diff = l1_graph(g, z, z_hat);
    let mut total = g.add(l1, diff);
    let v = |g: &Graph<'_, T>, x: Var| g.value(x).item().to_f64_lossy();
    let mut eps_val = 0.0;
    if let Some((pred, target)) = eps {
        let e = mse_graph(g, pred, target);
        eps_val = v(g, e);
        let w = g.scale(e, lit(cfg.eps_weight));
        total = g.add(total, w);
    }
    let report = stage2_report(v(g, l1), v(g, diff), eps_val, cfg.eps_weight);
    (total, report)
}

fn eval_pair<T: Scalar>(a: Tensor<T>, b: Tensor<T>, f: impl Fn(&mut Graph<'_, T>, Var, Var) -> Var) -> f64 {
    let mut g = Graph::detached();
    let (av, bv) = (g.constant(a), g.constant(b));
    let out = f(&mut g, av, bv);
    g.value(out).item().to_f64_lossy()
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(invalid(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn l1_loss<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>) -> Result<f64> {
    same_shape(a.tensor().shape(), b.tensor().shape())?;
    Ok(eval_pair(a.to_batch(), b.to_batch(), l1_graph))
}

pub fn grad_loss<T: Scalar>(d1: &DepthRaster<T>, d2: &DepthRaster<T>) -> Result<f64> {
    same_shape(d1.tensor().shape(), d2.tensor().shape())?;
    Ok(eval_pair(d1.to_batch(), d2.to_batch(), grad_graph))
}

pub fn depth_l1<T: Scalar>(d1: &DepthRaster<T>, d2: &DepthRaster<T>) -> Result<f64> {
    same_shape(d1.tensor().shape(), d2.tensor().shape())?;
    Ok(eval_pair(d1.to_batch(), d2.to_batch(), l1_graph))
}

pub fn depth_loss<T: Scalar>(d_pseudo: &DepthRaster<T>, d_hq: &DepthRaster<T>, lambda2: f64) -> Result<f64> {
    Ok(depth_l1(d_pseudo, d_hq)? + lambda2 * grad_loss(d_pseudo, d_hq)?)
}
