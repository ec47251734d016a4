//! Spatial-frequency prior generator.
//!
//! ```text
//! x ─(unshuffle 4)─ conv─lrelu─conv─lrelu ─ X_s
//! X_s ─FFT─┬─ |·| ─ 3 × ResBlock ─┐
//!          └─ arg ─ 3 × ResBlock ─┴─ polar ─ IFFT ─ X_f
//! X_f ─ 3 × (conv─lrelu) ─ 1×1 conv (N_p) ─ GAP ─ softmax ─ S
//! Z = Pᵀ S
//! ```
//!
//! The starred variant skips the unshuffle and takes the degraded image alone.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{invalid, Result};
use crate::image::{ImagePlane, PriorKind, PriorVector};
use crate::nn::{Builder, Conv2d, Init, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};

pub const LRELU_SLOPE: f64 = 0.2;
pub const UNSHUFFLE: usize = 4;
pub const PROMPT_INIT_STD: f64 = 0.02;
const RES_BLOCKS: usize = 3;

fn lrelu<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.leaky_relu(x, lit(LRELU_SLOPE))
}

/// `x + conv(lrelu(conv(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, ch: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            conv1: Conv2d::new(&mut b, "conv1", ch, ch, 3, 1, true),
            conv2: Conv2d::new(&mut b, "conv2", ch, ch, 3, 1, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = lrelu(g, h);
        let h = self.conv2.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Sfpg {
    pub unshuffle: bool,
    pub in_channels: usize,
    pub width: usize,
    pub encoder: [Conv2d; 2],
    pub amplitude: Vec<ResBlock>,
    pub phase: Vec<ResBlock>,
    pub post: [Conv2d; 3],
    pub head: Conv2d,
    /// `[N_p, Ĉ]` basic prompts.
    pub prompts: ParamId,
}

pub struct SfpgOutput {
    /// `[B, Ĉ]`
    pub z: Var,
    /// `[B, N_p]` softmax weights.
    pub weights: Var,
    /// `[B, N_p]`
    pub logits: Var,
}

impl Sfpg {
    /// Paired generator over `concat(lq, gt)`.
    pub fn paired<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, cfg: &RunConfig) -> Self {
        Self::build(b, name, 6, true, cfg)
    }

    /// Degraded-image-only generator, no unshuffle.
    pub fn star<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, cfg: &RunConfig) -> Self {
        Self::build(b, name, 3, false, cfg)
    }

    fn build<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        in_channels: usize,
        unshuffle: bool,
        cfg: &RunConfig,
    ) -> Self {
        let mut b = b.sub(name);
        let w = cfg.sfpg_width();
        let stem_in = if unshuffle { in_channels * UNSHUFFLE * UNSHUFFLE } else { in_channels };
        let encoder = [
            Conv2d::new(&mut b, "enc0", stem_in, w, 3, 1, true),
            Conv2d::new(&mut b, "enc1", w, w, 3, 1, true),
        ];
        let amplitude = (0..RES_BLOCKS).map(|i| ResBlock::new(&mut b, &format!("amp{i}"), w)).collect();
        let phase = (0..RES_BLOCKS).map(|i| ResBlock::new(&mut b, &format!("pha{i}"), w)).collect();
        let post = [
            Conv2d::new(&mut b, "post0", w, w, 3, 1, true),
            Conv2d::new(&mut b, "post1", w, w, 3, 1, true),
            Conv2d::new(&mut b, "post2", w, w, 3, 1, true),
        ];
        let head = Conv2d::new(&mut b, "head", w, cfg.num_prompts, 1, 1, true);
        let prompts = b.param("prompts", &[cfg.num_prompts, cfg.prior_dim], Init::Normal(PROMPT_INIT_STD));
        Self {
            unshuffle,
            in_channels,
            width: w,
            encoder,
            amplitude,
            phase,
            post,
            head,
            prompts,
        }
    }

    /// Logits `[B, N_p]` for `[B, H, W, in_channels]` input.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let mut h = if self.unshuffle { g.pixel_unshuffle(x, UNSHUFFLE) } else { x };
        for conv in &self.encoder {
            h = conv.forward(g, h);
            h = lrelu(g, h);
        }
        let spec = g.fft2(h);
        let mut amp = g.complex_abs(spec);
        let mut pha = g.complex_arg(spec);
        for blk in &self.amplitude {
            amp = blk.forward(g, amp);
        }
        for blk in &self.phase {
            pha = blk.forward(g, pha);
        }
        let merged = g.polar(amp, pha);
        let mut h = g.ifft2_real(merged);
        for conv in &self.post {
            h = conv.forward(g, h);
            h = lrelu(g, h);
        }
        let h = self.head.forward(g, h);
        g.global_avg_pool(h)
    }

    /// `Z = Pᵀ softmax(logits)`.
    pub fn mix_prompts<T: Scalar>(&self, g: &mut Graph<'_, T>, logits: Var) -> (Var, Var) {
        let s = g.softmax(logits);
        let p = g.param(self.prompts);
        (g.linear(s, p, None), s)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> SfpgOutput {
        let logits = self.logits(g, x);
        let (z, weights) = self.mix_prompts(g, logits);
        SfpgOutput { z, weights, logits }
    }

    /// Spatial size divisor required by the input.
    pub fn divisor(&self) -> usize {
        if self.unshuffle {
            UNSHUFFLE
        } else {
            1
        }
    }
}

/// Degradation prior from a paired image, with the prompt weights.
pub fn sfpg_forward<T: Scalar>(
    store: &ParamStore<T>,
    sfpg: &Sfpg,
    x_lq: &ImagePlane<T>,
    x_gt: &ImagePlane<T>,
) -> Result<(PriorVector<T>, Vec<T>)> {
    if x_lq.tensor().shape() != x_gt.tensor().shape() {
        return Err(invalid(format!(
            "lq {:?} and gt {:?} differ in size",
            x_lq.tensor().shape(),
            x_gt.tensor().shape()
        )));
    }
    if x_lq.channels() != 3 || x_lq.height() % UNSHUFFLE != 0 || x_lq.width() % UNSHUFFLE != 0 {
        return Err(invalid(format!(
            "paired prior needs RGB with sides divisible by {UNSHUFFLE}, got {:?}",
            x_lq.tensor().shape()
        )));
    }
    let mut g = Graph::inference(store);
    let (a, b) = (g.constant(x_lq.to_batch()), g.constant(x_gt.to_batch()));
    let x = g.concat_last(&[a, b]);
    let out = sfpg.forward(&mut g, x);
    let z = PriorVector::new(g.value(out.z).data().to_vec(), PriorKind::Prior)?;
    Ok((z, g.value(out.weights).data().to_vec()))
}

/// Diffusion condition from the degraded image alone.
pub fn sfpg_star_forward<T: Scalar>(
    store: &ParamStore<T>,
    sfpg_star: &Sfpg,
    x_lq: &ImagePlane<T>,
) -> Result<PriorVector<T>> {
    if x_lq.channels() != 3 || !x_lq.tensor().all_finite() {
        return Err(invalid("condition generator needs finite RGB input"));
    }
    let mut g = Graph::inference(store);
    let x = g.constant(x_lq.to_batch());
    let out = sfpg_star.forward(&mut g, x);
    PriorVector::new(g.value(out.z).data().to_vec(), PriorKind::Condition)
}
