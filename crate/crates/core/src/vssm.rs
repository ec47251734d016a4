//! Four-direction 2-D selective scan.
//!
//! `u = in_proj(x)`; for each direction `d` (row-major, reversed row-major,
//! column-major, reversed column-major) the tokens are scanned with their own
//! `Δ = softplus(W_Δ u + b_Δ)`, `B = W_B u`, `C = W_C u`, `A = −exp(a_log)`
//! and `D`. The four outputs land back at their source positions, are
//! averaged and projected by `out_proj`.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, ScanOrder, Var};
use crate::error::{invalid, Result};
use crate::image::ImagePlane;
use crate::nn::{Builder, Init, Linear, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const DIRECTIONS: usize = 4;
pub const A_MIN: f64 = 1e-4;
pub const A_MAX: f64 = 1.0;
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 0.1;

/// The four token visiting orders of an `h × w` grid (row-major token ids).
pub fn scan_paths(h: usize, w: usize) -> [Vec<usize>; DIRECTIONS] {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    let row_rev = row.iter().rev().copied().collect();
    let col_rev = col.iter().rev().copied().collect();
    [row, row_rev, col, col_rev]
}

/// Puts `seq[s]` back at token `order[s]`.
pub fn refold<V: Copy + Default>(seq: &[V], order: &[usize]) -> Vec<V> {
    let mut out = vec![V::default(); seq.len()];
    for (s, &t) in order.iter().enumerate() {
        out[t] = seq[s];
    }
    out
}

#[derive(Debug, Clone)]
pub struct Direction {
    pub delta: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// `[E, N]`, `A = −exp(a_log)`.
    pub a_log: ParamId,
    /// `[E]`
    pub d: ParamId,
}

#[derive(Debug, Clone)]
pub struct Vssm {
    pub in_proj: Linear,
    pub dirs: Vec<Direction>,
    pub out_proj: Linear,
    pub inner: usize,
    pub states: usize,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Vssm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        channels: usize,
        expand: usize,
        states: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let e = channels * expand;
        let in_proj = Linear::new(&mut b, "in_proj", channels, e, true);
        let mut dirs = Vec::with_capacity(DIRECTIONS);
        for k in 0..DIRECTIONS {
            let mut b = b.sub(format!("dir{k}"));
            let delta = Linear::with_init(&mut b, "delta", e, e, Init::FanIn(e), Some(Init::Zeros));
            let bias = delta.bias.expect("delta bias");
            let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
            let dt: Vec<f64> = (0..e).map(|_| (lo + (hi - lo) * b.rng().random::<f64>()).exp()).collect();
            let b_proj = Linear::new(&mut b, "b_proj", e, states, false);
            let c_proj = Linear::new(&mut b, "c_proj", e, states, false);
            let a_log = b.param("a_log", &[e, states], Init::Zeros);
            let d = b.param("d", &[e], Init::Constant(1.0));
            let ds = Direction { delta, b_proj, c_proj, a_log, d };
            let store_dt = dt.into_iter().map(|v| lit::<T>(inverse_softplus(v))).collect::<Vec<_>>();
            b.set(bias, Tensor::new(vec![e], store_dt).expect("shape"));
            let a_init: Vec<T> = (0..e * states)
                .map(|i| {
                    let n = i % states;
                    let frac = if states > 1 { n as f64 / (states - 1) as f64 } else { 1.0 };
                    lit(A_MIN.ln() + frac * (A_MAX.ln() - A_MIN.ln()))
                })
                .collect();
            b.set(ds.a_log, Tensor::new(vec![e, states], a_init).expect("shape"));
            dirs.push(ds);
        }
        let out_proj = Linear::new(&mut b, "out_proj", e, channels, true);
        Self { in_proj, dirs, out_proj, inner: e, states }
    }

    /// `[B, H, W, C] -> [B, H, W, C]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (bn, h, w) = (s[0], s[1], s[2]);
        let u = self.in_proj.forward(g, x);
        let u = g.reshape(u, &[bn, h * w, self.inner]);
        let paths = scan_paths(h, w);
        let mut ys = Vec::with_capacity(DIRECTIONS);
        for (dir, path) in self.dirs.iter().zip(paths) {
            let order: ScanOrder = Some(Arc::from(path));
            let dl = dir.delta.forward(g, u);
            let dl = g.softplus(dl);
            let bm = dir.b_proj.forward(g, u);
            let cm = dir.c_proj.forward(g, u);
            let a_log = g.param(dir.a_log);
            let a = g.exp(a_log);
            let a = g.neg(a);
            let d = g.param(dir.d);
            ys.push(g.selective_scan(u, dl, a, bm, cm, d, order));
        }
        let y = g.add_n(&ys);
        let y = g.scale(y, lit(1.0 / DIRECTIONS as f64));
        let y = g.reshape(y, &[bn, h, w, self.inner]);
        self.out_proj.forward(g, y)
    }
}

/// Runs the module on one feature plane.
pub fn vssm_forward<T: Scalar>(store: &ParamStore<T>, vssm: &Vssm, x: &ImagePlane<T>) -> Result<ImagePlane<T>> {
    if x.channels() != vssm.in_proj.din {
        return Err(invalid(format!(
            "expected {} channels, got {}",
            vssm.in_proj.din,
            x.channels()
        )));
    }
    let mut g = Graph::inference(store);
    let xv = g.constant(x.to_batch());
    let y = vssm.forward(&mut g, xv);
    ImagePlane::feature(g.value(y).index_first(0))
}

/// Selective scan of one `[L, E]` sequence in natural order.
pub fn selective_scan<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    if u.rank() != 2 || delta.shape() != u.shape() || a.rank() != 2 || a.dim(0) != u.dim(1) {
        return Err(invalid("selective_scan expects u, delta [L, E] and A [E, N]"));
    }
    let (l, e, n) = (u.dim(0), u.dim(1), a.dim(1));
    if b.shape() != [l, n] || c.shape() != [l, n] || d.shape() != [e] {
        return Err(invalid("selective_scan expects B, C [L, N] and D [E]"));
    }
    let mut g = Graph::<T>::detached();
    let lift = |t: &Tensor<T>| t.clone().reshape(&[1, t.dim(0), t.dim(1)]);
    let uv = g.constant(lift(u)?);
    let dv = g.constant(lift(delta)?);
    let av = g.constant(a.clone());
    let bv = g.constant(lift(b)?);
    let cv = g.constant(lift(c)?);
    let ddv = g.constant(d.clone());
    let y = g.selective_scan(uv, dv, av, bv, cv, ddv, None);
    g.value(y).index_first(0).reshape(&[l, e])
}
