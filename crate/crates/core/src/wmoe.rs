//! Water mixture-of-experts feed-forward layer.
//!
//! A 3×3 conv lifts `C` to `2C` channels, split into `F_a` and `F_b`; a
//! depthwise 3×3 conv turns `F_b` into `F_b_local`. Expert `i` (1-based) is
//! `T3(T1(F_a) ⊙ T2(F_b_local))` with bias-free 1×1 maps through `2^(i+1)`
//! channels. A two-layer router on `GAP(F_b_local)` weighs the experts: every
//! expert contributes while training, only the top-k (weights kept as is)
//! at inference.

use std::fmt::Write as _;

use rand::Rng;

use crate::autograd::layers::softmax_in_place;
use crate::autograd::{conv_macs, ConvGeom, Graph, Var};
use crate::error::{invalid, Result};
use crate::nn::{Builder, Conv2d, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeMode {
    Train,
    Infer,
}

/// Intermediate width of expert `i` (1-based).
pub fn expert_width(i: usize) -> usize {
    1 << (i + 1)
}

#[derive(Debug, Clone)]
pub struct LowRankExpert {
    pub index: usize,
    pub t1: Linear,
    pub t2: Linear,
    pub t3: Linear,
}

impl LowRankExpert {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, index: usize, channels: usize) -> Self {
        let mut b = b.sub(format!("expert{index}"));
        let cl = expert_width(index);
        Self {
            index,
            t1: Linear::new(&mut b, "t1", channels, cl, false),
            t2: Linear::new(&mut b, "t2", channels, cl, false),
            t3: Linear::new(&mut b, "t3", cl, channels, false),
        }
    }

    pub fn low_rank(&self) -> usize {
        self.t1.dout
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fa: Var, fb_local: Var) -> Var {
        let a = self.t1.forward(g, fa);
        let b = self.t2.forward(g, fb_local);
        let h = g.mul(a, b);
        self.t3.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct Router {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct Wmoe {
    pub channels: usize,
    pub proj: Conv2d,
    pub dw: Conv2d,
    pub experts: Vec<LowRankExpert>,
    pub router: Router,
}

/// Per-image routing decision of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing<T> {
    /// `[B][N]` softmax weights.
    pub weights: Vec<Vec<T>>,
    /// `[B][k]` selected experts, strongest first.
    pub selected: Vec<Vec<usize>>,
}

pub struct WmoeOutput<T> {
    pub out: Var,
    pub routing: Routing<T>,
}

/// Softmax weights and the `k` strongest indices; ties go to the lower index.
pub fn route<T: Scalar>(logits: &[T], k: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if k == 0 || k > logits.len() {
        return Err(invalid(format!("top-k must satisfy 1 <= k <= {}, got {k}", logits.len())));
    }
    let mut w = logits.to_vec();
    softmax_in_place(&mut w);
    Ok((w.clone(), top_k(&w, k)))
}

pub fn top_k<T: Scalar>(w: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl Wmoe {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        channels: usize,
        num_experts: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let proj = Conv2d::new(&mut b, "proj", channels, 2 * channels, 3, 1, false);
        let dw = Conv2d::depthwise(&mut b, "dw", channels, 3, false);
        let experts = (1..=num_experts).map(|i| LowRankExpert::new(&mut b, i, channels)).collect();
        let router = {
            let mut b = b.sub("router");
            Router {
                hidden: Linear::new(&mut b, "hidden", channels, channels, true),
                out: Linear::new(&mut b, "out", channels, num_experts, true),
            }
        };
        Self { channels, proj, dw, experts, router }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `(F_a, F_b_local)` from `[B, H, W, C]`.
    pub fn split_views<T: Scalar>(&self, g: &mut Graph<'_, T>, fm: Var) -> (Var, Var) {
        let h = self.proj.forward(g, fm);
        let fa = g.narrow_last(h, 0, self.channels);
        let fb = g.narrow_last(h, self.channels, self.channels);
        (fa, self.dw.forward(g, fb))
    }

    /// Router logits `[B, N]`.
    pub fn router_logits<T: Scalar>(&self, g: &mut Graph<'_, T>, fb_local: Var) -> Var {
        let pooled = g.global_avg_pool(fb_local);
        let h = self.router.hidden.forward(g, pooled);
        let h = g.relu(h);
        self.router.out.forward(g, h)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fm: Var, mode: MoeMode, k: usize) -> WmoeOutput<T> {
        assert_eq!(*g.shape(fm).last().expect("rank 4"), self.channels, "W-MoE channel count");
        let n = self.num_experts();
        let k = k.clamp(1, n);
        let (fa, fbl) = self.split_views(g, fm);
        let logits = self.router_logits(g, fbl);
        let w = g.softmax(logits);
        let wv = g.value(w).clone();
        let batch = wv.dim(0);
        let weights: Vec<Vec<T>> = wv.data().chunks(n).map(|r| r.to_vec()).collect();
        let selected: Vec<Vec<usize>> = weights.iter().map(|r| top_k(r, k)).collect();
        let mut terms = Vec::with_capacity(n);
        for (i, expert) in self.experts.iter().enumerate() {
            let wi = g.narrow_last(w, i, 1);
            let wi = g.reshape(wi, &[batch, 1, 1, 1]);
            let gate = match mode {
                MoeMode::Train => wi,
                MoeMode::Infer => {
                    let mask: Vec<T> = selected
                        .iter()
                        .map(|s| if s.contains(&i) { T::one() } else { T::zero() })
                        .collect();
                    if mask.iter().all(|m| m.is_zero()) {
                        continue;
                    }
                    if mask.iter().all(|m| !m.is_zero()) {
                        wi
                    } else {
                        let m = g.constant(Tensor::new(vec![batch, 1, 1, 1], mask).expect("shape"));
                        g.mul(wi, m)
                    }
                }
            };
            let y = expert.forward(g, fa, fbl);
            terms.push(g.mul(y, gate));
        }
        let out = g.add_n(&terms);
        WmoeOutput {
            out,
            routing: Routing { weights, selected },
        }
    }

    /// Multiply-accumulates of one forward on an `h × w` map with `active`
    /// experts evaluated.
    pub fn macs(&self, h: usize, w: usize, active: usize) -> u64 {
        let c = self.channels;
        let geom = |cin, cout, depthwise| ConvGeom {
            batch: 1,
            h,
            w,
            cin,
            cout,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            depthwise,
        };
        let hw = (h * w) as u64;
        let mut total = conv_macs(&geom(c, 2 * c, false)) + conv_macs(&geom(c, c, true));
        total += (c * c + c * self.num_experts()) as u64;
        for e in self.experts.iter().take(active) {
            let cl = e.low_rank() as u64;
            total += hw * (3 * c as u64 * cl + cl);
        }
        total
    }
}

/// Expert selection counts, per layer and expert.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExpertHistogram {
    pub counts: Vec<Vec<u64>>,
}

impl ExpertHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<T>(&mut self, layer: usize, num_experts: usize, routing: &Routing<T>) {
        if self.counts.len() <= layer {
            self.counts.resize(layer + 1, Vec::new());
        }
        let row = &mut self.counts[layer];
        if row.len() < num_experts {
            row.resize(num_experts, 0);
        }
        for sel in &routing.selected {
            for &e in sel {
                row[e] += 1;
            }
        }
    }

    /// Counts summed over layers.
    pub fn totals(&self) -> Vec<u64> {
        let n = self.counts.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = vec![0; n];
        for row in &self.counts {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }

    pub fn merge(&mut self, other: &Self) {
        for (layer, row) in other.counts.iter().enumerate() {
            if self.counts.len() <= layer {
                self.counts.resize(layer + 1, Vec::new());
            }
            let dst = &mut self.counts[layer];
            if dst.len() < row.len() {
                dst.resize(row.len(), 0);
            }
            for (d, c) in dst.iter_mut().zip(row) {
                *d += c;
            }
        }
    }

    /// `expert_id,count` rows, experts numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("expert_id,count\n");
        for (i, c) in self.totals().iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, c);
        }
        s
    }
}
