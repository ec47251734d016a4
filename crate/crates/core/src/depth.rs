//! Depth maps: a differentiable luminance stub and an external-command client.
//!
//! External contract: `<command...> <in.png> <out.png>` where `in.png` is an
//! 8-bit RGB image and `out.png` a single-channel (preferably 16-bit) PNG of
//! the same size. Raw values are min/max normalized on read.

use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autograd::shape::box_blur_tensor;
use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::image::{DepthProvenance, DepthRaster, ImagePlane};
use crate::io;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const STUB_BLUR_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthProviderSpec {
    pub mode: DepthMode,
    pub external_command: Option<String>,
    pub differentiable: bool,
}

impl DepthProviderSpec {
    pub fn stub() -> Self {
        Self {
            mode: DepthMode::Stub,
            external_command: None,
            differentiable: true,
        }
    }

    pub fn external(command: impl Into<String>) -> Self {
        Self {
            mode: DepthMode::External,
            external_command: Some(command.into()),
            differentiable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            DepthMode::Stub if !self.differentiable => {
                Err(invalid("the stub depth provider is always differentiable"))
            }
            DepthMode::External
                if self.external_command.as_deref().map_or(true, |c| c.trim().is_empty()) =>
            {
                Err(invalid("external depth mode needs a command"))
            }
            _ => Ok(()),
        }
    }
}

/// Stub depth on a recorded graph: box blur of `1 − Y` for `[B, H, W, 3]`
/// input, giving `[B, H, W, 1]`.
pub fn stub_depth_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let w = g.constant(Tensor::from_fn(&[3, 1], |i| lit(LUMA[i])));
    let y = g.linear(x, w, None);
    let inv = g.neg(y);
    let inv = g.add_scalar(inv, T::one());
    g.box_blur(inv, STUB_BLUR_RADIUS)
}

/// Stub depth of a `[B, H, W, 3]` batch without recording.
pub fn stub_depth_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (l0, l1, l2) = (lit::<T>(LUMA[0]), lit::<T>(LUMA[1]), lit::<T>(LUMA[2]));
    let inv: Vec<T> = x
        .data()
        .chunks(3)
        .map(|p| T::one() - (l0 * p[0] + l1 * p[1] + l2 * p[2]))
        .collect();
    let t = Tensor::new(vec![s[0], s[1], s[2], 1], inv).expect("shape");
    let mut out = box_blur_tensor(&t, STUB_BLUR_RADIUS);
    // rounding can leave values a hair outside [0, 1]
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
    out
}

pub fn predict_depth<T: Scalar>(img: &ImagePlane<T>, spec: &DepthProviderSpec) -> Result<DepthRaster<T>> {
    spec.validate()?;
    if img.channels() != 3 {
        return Err(invalid(format!("depth needs RGB input, got {} channels", img.channels())));
    }
    match spec.mode {
        DepthMode::Stub => {
            let d = stub_depth_tensor(&img.to_batch());
            let d = d.reshape(&[img.height(), img.width()])?;
            DepthRaster::new(d, DepthProvenance::Stub)
        }
        DepthMode::External => {
            let raw = run_external(spec.external_command.as_deref().unwrap_or_default(), img)?;
            if raw.shape() != [img.height(), img.width()] {
                return Err(Error::Provider {
                    message: format!(
                        "depth map is {:?}, image is {}×{}",
                        raw.shape(),
                        img.height(),
                        img.width()
                    ),
                    diagnostics: String::new(),
                });
            }
            normalize_depth(&raw.cast::<T>())
        }
    }
}

static CALL_COUNTER: AtomicU64 = AtomicU64::new(0);

struct ScratchDir(PathBuf);

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn run_external<T: Scalar>(command: &str, img: &ImagePlane<T>) -> Result<Tensor<f64>> {
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| invalid("empty depth command"))?;
    let n = CALL_COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = ScratchDir(std::env::temp_dir().join(format!("uniuir-depth-{}-{n}", std::process::id())));
    std::fs::create_dir_all(&dir.0)?;
    let (inp, out) = (dir.0.join("in.png"), dir.0.join("out.png"));
    io::save_rgb(img, &inp)?;
    let result = Command::new(program).args(parts).arg(&inp).arg(&out).output();
    let output = result.map_err(|e| Error::Provider {
        message: format!("cannot start {program:?}: {e}"),
        diagnostics: String::new(),
    })?;
    let diagnostics = format!(
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    if !output.status.success() {
        return Err(Error::Provider {
            message: format!("{program:?} exited with {}", output.status),
            diagnostics,
        });
    }
    io::load_gray16(&out).map_err(|e| Error::Provider {
        message: format!("unreadable depth output: {e}"),
        diagnostics,
    })
}

/// Affine min/max rescale to `[0, 1]`; constant input maps to 0.5.
pub fn normalize_depth<T: Scalar>(raw: &Tensor<T>) -> Result<DepthRaster<T>> {
    if raw.rank() != 2 {
        return Err(invalid(format!("raw depth must be [H, W], got {:?}", raw.shape())));
    }
    if !raw.all_finite() {
        return Err(invalid("raw depth has NaN or infinite values"));
    }
    let (lo, hi) = (raw.min_value(), raw.max_value());
    let data = if hi > lo {
        let inv = T::one() / (hi - lo);
        raw.map(|v| ((v - lo) * inv).min(T::one()))
    } else {
        Tensor::full(raw.shape(), lit(0.5))
    };
    DepthRaster::new(data, DepthProvenance::External)
}

/// 2×2 average pooling applied `level` times.
pub fn downsample_depth<T: Scalar>(d: &DepthRaster<T>, level: usize) -> Result<DepthRaster<T>> {
    if level > 3 {
        return Err(invalid(format!("level must be 0..=3, got {level}")));
    }
    let f = 1 << level;
    if d.height() % f != 0 || d.width() % f != 0 {
        return Err(invalid(format!(
            "{}×{} depth is not divisible by {f}",
            d.height(),
            d.width()
        )));
    }
    let t = avg_pool_levels(&d.to_batch(), level);
    DepthRaster::new(t.reshape(&[d.height() / f, d.width() / f])?, d.provenance())
}

/// 2×2 average pooling of a `[B, H, W, C]` tensor, `levels` times.
pub fn avg_pool_levels<T: Scalar>(x: &Tensor<T>, levels: usize) -> Tensor<T> {
    let mut cur = x.clone();
    let quarter: T = lit(0.25);
    for _ in 0..levels {
        let s = cur.shape().to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = cur.data();
        let mut out = vec![T::zero(); b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let at = |yy: usize, xx: usize| src[((bi * h + yy) * w + xx) * c + ch];
                        out[((bi * oh + y) * ow + x) * c + ch] = (at(2 * y, 2 * x)
                            + at(2 * y, 2 * x + 1)
                            + at(2 * y + 1, 2 * x)
                            + at(2 * y + 1, 2 * x + 1))
                            * quarter;
                    }
                }
            }
        }
        cur = Tensor::new(vec![b, oh, ow, c], out).expect("shape");
    }
    cur
}
