//! U-shaped restorer built from prior- and depth-conditioned blocks.
//!
//! Block:
//!
//! ```text
//! F_d = VSSM(LN1(F) ⊙ scale1(Z) + shift1(Z)) + F
//! F̂_d = LN2(F_d) ⊙ softmax_c(relu(conv3×3(D_n)))
//! F̂   = WMoE(F̂_d ⊙ scale2(Z) + shift2(Z)) + F_d
//! ```
//!
//! Network: stem conv, three encoder levels (blocks, strided conv down), a
//! bottleneck level, three decoder levels (nearest ×2 + conv up, concat skip,
//! 1×1 fuse, blocks) and a zero-initialized head added to the input.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::depth::avg_pool_levels;
use crate::error::{invalid, Result};
use crate::image::{DepthRaster, ImagePlane, PriorVector};
use crate::nn::{Builder, Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vssm::Vssm;
use crate::wmoe::{ExpertHistogram, MoeMode, Wmoe};

pub const LEVELS: usize = 4;
pub const MODULATION_INIT_STD: f64 = 0.02;
/// Spatial sides must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << (LEVELS - 1);

/// Per-channel affine map of a feature plane driven by the prior.
#[derive(Debug, Clone)]
pub struct PriorModulation {
    pub scale: Linear,
    pub shift: Linear,
}

impl PriorModulation {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        prior_dim: usize,
        channels: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let std = Init::Normal(MODULATION_INIT_STD);
        Self {
            scale: Linear::with_init(&mut b, "scale", prior_dim, channels, std, Some(Init::Constant(1.0))),
            shift: Linear::with_init(&mut b, "shift", prior_dim, channels, std, Some(Init::Zeros)),
        }
    }

    /// `x ⊙ scale(z) + shift(z)` for `x: [B, H, W, C]`, `z: [B, Ĉ]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, z: Var) -> Var {
        let b = g.shape(z)[0];
        let c = self.scale.dout;
        let sc = self.scale.forward(g, z);
        let sc = g.reshape(sc, &[b, 1, 1, c]);
        let sh = self.shift.forward(g, z);
        let sh = g.reshape(sh, &[b, 1, 1, c]);
        let y = g.mul(x, sc);
        g.add(y, sh)
    }
}

/// Per-pixel channel gate from a depth map: `softmax_c(relu(conv3×3(d)))`.
#[derive(Debug, Clone)]
pub struct DepthGate {
    pub conv: Conv2d,
}

impl DepthGate {
    pub fn gate<T: Scalar>(&self, g: &mut Graph<'_, T>, d: Var) -> Var {
        let a = self.conv.forward(g, d);
        let a = g.relu(a);
        g.softmax(a)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x_norm: Var, d: Var) -> Var {
        let gate = self.gate(g, d);
        g.mul(x_norm, gate)
    }
}

#[derive(Debug, Clone)]
pub struct Mmoeb {
    pub channels: usize,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub mod1: PriorModulation,
    pub mod2: PriorModulation,
    pub vssm: Vssm,
    pub depth: DepthGate,
    pub wmoe: Wmoe,
}

impl Mmoeb {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        channels: usize,
        cfg: &RunConfig,
    ) -> Self {
        let mut b = b.sub(name);
        Self {
            channels,
            ln1: LayerNorm::new(&mut b, "ln1", channels),
            ln2: LayerNorm::new(&mut b, "ln2", channels),
            mod1: PriorModulation::new(&mut b, "mod1", cfg.prior_dim, channels),
            mod2: PriorModulation::new(&mut b, "mod2", cfg.prior_dim, channels),
            vssm: Vssm::new(&mut b, "vssm", channels, cfg.ssm_expand, cfg.ssm_state),
            depth: DepthGate {
                conv: Conv2d::new(&mut b, "depth_conv", 1, channels, 3, 1, true),
            },
            wmoe: Wmoe::new(&mut b, "wmoe", channels, cfg.num_experts),
        }
    }

    /// Zeroes the final projections of both residual branches.
    pub fn zero_residuals<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.vssm.out_proj.zero_init(store);
        for e in &self.wmoe.experts {
            e.t3.zero_init(store);
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f: Var,
        z: Var,
        d: Var,
        mode: MoeMode,
        k: usize,
        hist: Option<(&mut ExpertHistogram, usize)>,
    ) -> Var {
        let x = self.ln1.forward(g, f);
        let x = self.mod1.forward(g, x, z);
        let x = self.vssm.forward(g, x);
        let fd = g.add(x, f);
        let x = self.ln2.forward(g, fd);
        let x = self.depth.forward(g, x, d);
        let x = self.mod2.forward(g, x, z);
        let moe = self.wmoe.forward(g, x, mode, k);
        if let Some((h, layer)) = hist {
            h.record(layer, self.wmoe.num_experts(), &moe.routing);
        }
        g.add(moe.out, fd)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub widths: Vec<usize>,
    pub stem: Conv2d,
    pub encoder: Vec<Vec<Mmoeb>>,
    pub down: Vec<Conv2d>,
    pub up: Vec<Conv2d>,
    pub fuse: Vec<Linear>,
    pub decoder: Vec<Vec<Mmoeb>>,
    pub head: Conv2d,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, cfg: &RunConfig) -> Self {
        let mut b = b.sub(name);
        let w = cfg.stage_widths.clone();
        let d = &cfg.stage_depths;
        let stem = Conv2d::new(&mut b, "stem", 3, w[0], 3, 1, true);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..LEVELS {
            encoder.push(
                (0..d[l])
                    .map(|i| Mmoeb::new(&mut b, &format!("enc{l}.{i}"), w[l], cfg))
                    .collect(),
            );
            if l + 1 < LEVELS {
                down.push(Conv2d::new(&mut b, &format!("down{l}"), w[l], w[l + 1], 3, 2, true));
            }
        }
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..LEVELS - 1 {
            up.push(Conv2d::new(&mut b, &format!("up{l}"), w[l + 1], w[l], 3, 1, true));
            fuse.push(Linear::new(&mut b, &format!("fuse{l}"), 2 * w[l], w[l], true));
            decoder.push(
                (0..d[l])
                    .map(|i| Mmoeb::new(&mut b, &format!("dec{l}.{i}"), w[l], cfg))
                    .collect(),
            );
        }
        let head = Conv2d::new(&mut b, "head", w[0], 3, 3, 1, true);
        let net = Self { widths: w, stem, encoder, down, up, fuse, decoder, head };
        net.head.zero_init(b.store_mut());
        net
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Mmoeb> {
        self.encoder.iter().chain(&self.decoder).flatten()
    }

    pub fn num_moe_layers(&self) -> usize {
        self.blocks().count()
    }

    /// `clip(x + head(U-Net(stem(x))))` for `x: [B, H, W, 3]`, `z: [B, Ĉ]`
    /// and full-resolution depth `d: [B, H, W, 1]` (used as a constant).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        z: Var,
        depth: &Tensor<T>,
        mode: MoeMode,
        k: usize,
        mut hist: Option<&mut ExpertHistogram>,
    ) -> Var {
        let pyramid: Vec<Var> = (0..LEVELS)
            .map(|l| {
                let t = avg_pool_levels(depth, l);
                g.constant(t)
            })
            .collect();
        let mut layer = 0;
        let mut run = |g: &mut Graph<'_, T>, blk: &Mmoeb, f: Var, d: Var| {
            let h = hist.as_deref_mut().map(|h| (h, layer));
            layer += 1;
            blk.forward(g, f, z, d, mode, k, h)
        };
        let mut f = self.stem.forward(g, x);
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS {
            for blk in &self.encoder[l] {
                f = run(g, blk, f, pyramid[l]);
            }
            if l + 1 < LEVELS {
                skips.push(f);
                f = self.down[l].forward(g, f);
            }
        }
        for l in (0..LEVELS - 1).rev() {
            let u = g.upsample_nearest2(f);
            let u = self.up[l].forward(g, u);
            let cat = g.concat_last(&[u, skips[l]]);
            f = self.fuse[l].forward(g, cat);
            for blk in &self.decoder[l] {
                f = run(g, blk, f, pyramid[l]);
            }
        }
        let r = self.head.forward(g, f);
        let y = g.add(x, r);
        g.clamp(y, T::zero(), T::one())
    }
}

/// Restores one image. Sides must be multiples of [`SIZE_MULTIPLE`].
#[allow(clippy::too_many_arguments)]
pub fn restore<T: Scalar>(
    store: &ParamStore<T>,
    net: &Backbone,
    x_lq: &ImagePlane<T>,
    z: &PriorVector<T>,
    d: &DepthRaster<T>,
    mode: MoeMode,
    k: usize,
    hist: Option<&mut ExpertHistogram>,
) -> Result<ImagePlane<T>> {
    if x_lq.channels() != 3 {
        return Err(invalid(format!("expected RGB, got {} channels", x_lq.channels())));
    }
    if x_lq.height() % SIZE_MULTIPLE != 0 || x_lq.width() % SIZE_MULTIPLE != 0 {
        return Err(invalid(format!(
            "{}×{} is not a multiple of {SIZE_MULTIPLE}; pad first",
            x_lq.height(),
            x_lq.width()
        )));
    }
    if (d.height(), d.width()) != (x_lq.height(), x_lq.width()) {
        return Err(invalid("depth size differs from image size"));
    }
    let prior_dim = net.blocks().next().map_or(z.len(), |b| b.mod1.scale.din);
    if z.len() != prior_dim {
        return Err(invalid(format!("prior length {} != {prior_dim}", z.len())));
    }
    let mut g = Graph::inference(store);
    let x = g.constant(x_lq.to_batch());
    let zv = g.constant(Tensor::new(vec![1, z.len()], z.values().to_vec())?);
    let y = net.forward(&mut g, x, zv, &d.to_batch(), mode, k, hist);
    ImagePlane::unit(g.value(y).index_first(0))
}
