//! Image quality metrics: PSNR and SSIM (full reference), UCIQE and UIQM
//! (no reference). All arithmetic is done in `f64`.

use std::fmt::Write as _;

use crate::depth::LUMA;
use crate::error::{invalid, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// UCIQE weights of chroma spread, luminance contrast and mean saturation
/// (Yang & Sowmya, 2015).
pub const UCIQE_WEIGHTS: [f64; 3] = [0.4680, 0.2745, 0.2576];
/// Share of pixels cut from each end of the luminance range for the contrast term.
pub const UCIQE_QUANTILE: f64 = 0.01;

/// UIQM weights of UICM, UISM and UIConM (Panetta, Gao & Agaian, 2016).
pub const UIQM_WEIGHTS: [f64; 3] = [0.0282, 0.2953, 3.5753];
pub const UIQM_BLOCK: usize = 8;
/// Trim fractions of the asymmetric alpha-trimmed mean in UICM.
pub const UICM_TRIM: (f64, f64) = (0.1, 0.1);

fn check_same<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(invalid(format!(
            "images differ in shape: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

fn values<T: Scalar>(img: &ImagePlane<T>) -> Vec<f64> {
    img.tensor().data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// `10 log10(peak² / MSE)` over every sample; identical inputs give `+∞`.
pub fn psnr<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let (va, vb) = (values(a), values(b));
    let mse = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / va.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Luminance (RGB) or the single channel, as `H × W` values.
fn luminance<T: Scalar>(img: &ImagePlane<T>) -> Result<Vec<f64>> {
    let v = values(img);
    match img.channels() {
        1 => Ok(v),
        3 => Ok(v.chunks(3).map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).collect()),
        c => Err(invalid(format!("SSIM needs 1 or 3 channels, got {c}"))),
    }
}

/// Normalized `SSIM_WINDOW`-tap Gaussian.
pub fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM of the luminance over every fully covered window position.
pub fn ssim<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let (x, y) = (luminance(a)?, luminance(b)?);
    let taps = gaussian_taps();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // separable filtering of x, y, x², y², xy: rows first, then columns
    let fields: [Vec<f64>; 5] = [
        x.clone(),
        y.clone(),
        x.iter().map(|v| v * v).collect(),
        y.iter().map(|v| v * v).collect(),
        x.iter().zip(&y).map(|(a, b)| a * b).collect(),
    ];
    let filtered: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| {
            let mut rows = vec![0.0; h * ow];
            for r in 0..h {
                for c in 0..ow {
                    rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| taps[k] * f[r * w + c + k]).sum();
                }
            }
            let mut out = vec![0.0; oh * ow];
            for r in 0..oh {
                for c in 0..ow {
                    out[r * ow + c] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(r + k) * ow + c]).sum();
                }
            }
            out
        })
        .collect();
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (mx, my) = (filtered[0][i], filtered[1][i]);
        let sxx = filtered[2][i] - mx * mx;
        let syy = filtered[3][i] - my * my;
        let sxy = filtered[4][i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
    Ok(total / (oh * ow) as f64)
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn lab_f(t: f64) -> f64 {
    const EPS: f64 = 216.0 / 24389.0;
    const KAPPA: f64 = 24389.0 / 27.0;
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// CIELab (D65) of an sRGB pixel in `[0, 1]`. The white point is the image
/// of RGB white under the matrix, so neutral greys map to `a = b ≈ 0`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| RGB_TO_XYZ[r][c] * lin[c]).sum());
    let white: [f64; 3] = std::array::from_fn(|r| RGB_TO_XYZ[r].iter().sum());
    let f: [f64; 3] = std::array::from_fn(|i| lab_f(xyz[i] / white[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UciqeParts {
    /// Standard deviation of chroma.
    pub sigma_c: f64,
    /// Luminance contrast between the top and bottom quantiles.
    pub con_l: f64,
    /// Mean saturation (chroma over lightness).
    pub mu_s: f64,
}

impl UciqeParts {
    pub fn total(&self) -> f64 {
        UCIQE_WEIGHTS[0] * self.sigma_c + UCIQE_WEIGHTS[1] * self.con_l + UCIQE_WEIGHTS[2] * self.mu_s
    }
}

fn check_rgb<T: Scalar>(img: &ImagePlane<T>) -> Result<()> {
    if img.channels() != 3 {
        return Err(invalid(format!("expected RGB, got {} channels", img.channels())));
    }
    Ok(())
}

/// UCIQE terms with lightness and chroma scaled by 1/100.
pub fn uciqe_parts<T: Scalar>(img: &ImagePlane<T>) -> Result<UciqeParts> {
    check_rgb(img)?;
    let v = values(img);
    let n = v.len() / 3;
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    for p in v.chunks(3) {
        let lab = srgb_to_lab([p[0], p[1], p[2]]);
        lum.push(lab[0] / 100.0);
        chroma.push((lab[1] * lab[1] + lab[2] * lab[2]).sqrt() / 100.0);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let sigma_c = (chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = lum.clone();
    sorted.sort_by(f64::total_cmp);
    let hi = sorted[((n as f64 * (1.0 - UCIQE_QUANTILE)) as usize).min(n - 1)];
    let lo = sorted[(n as f64 * UCIQE_QUANTILE) as usize];
    let mu_s = chroma
        .iter()
        .zip(&lum)
        .map(|(&c, &l)| if l > 0.0 { c / l } else { 0.0 })
        .sum::<f64>()
        / n as f64;
    Ok(UciqeParts { sigma_c, con_l: hi - lo, mu_s })
}

pub fn uciqe<T: Scalar>(img: &ImagePlane<T>) -> Result<f64> {
    Ok(uciqe_parts(img)?.total())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiqmParts {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

impl UiqmParts {
    pub fn total(&self) -> f64 {
        UIQM_WEIGHTS[0] * self.uicm + UIQM_WEIGHTS[1] * self.uism + UIQM_WEIGHTS[2] * self.uiconm
    }
}

/// Mean after dropping `ceil(αL·K)` smallest and `floor(αR·K)` largest values.
pub fn trimmed_mean(xs: &[f64], alpha_l: f64, alpha_r: f64) -> f64 {
    let k = xs.len();
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let lo = (alpha_l * k as f64).ceil() as usize;
    let hi = (alpha_r * k as f64).floor() as usize;
    if lo + hi >= k {
        return s.iter().sum::<f64>() / k as f64;
    }
    s[lo..k - hi].iter().sum::<f64>() / (k - lo - hi) as f64
}

fn uicm(v: &[f64]) -> f64 {
    let rg: Vec<f64> = v.chunks(3).map(|p| p[0] - p[1]).collect();
    let yb: Vec<f64> = v.chunks(3).map(|p| (p[0] + p[1]) / 2.0 - p[2]).collect();
    let (mrg, myb) = (trimmed_mean(&rg, UICM_TRIM.0, UICM_TRIM.1), trimmed_mean(&yb, UICM_TRIM.0, UICM_TRIM.1));
    let var = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    let l = (mrg * mrg + myb * myb).sqrt();
    let r = (var(&rg, mrg) + var(&yb, myb)).sqrt();
    -0.0268 * l + 0.1586 * r
}

/// Sobel gradient magnitude with edge-repeating borders.
pub fn sobel_magnitude(ch: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        ch[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            out[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Full `b × b` blocks of an `h × w` grid; trailing partial blocks are dropped.
fn blocks(h: usize, w: usize, b: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..w / b).flat_map(move |bx| (0..h / b).map(move |by| (by * b, bx * b)))
}

/// EME: `2/(k1 k2) Σ log(max/min)` over blocks; blocks with a zero extreme add 0.
pub fn eme(x: &[f64], h: usize, w: usize, b: usize) -> f64 {
    let n = (h / b) * (w / b);
    if n == 0 {
        return 0.0;
    }
    let mut val = 0.0;
    for (y0, x0) in blocks(h, w, b) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y0 + b {
            for v in &x[y * w + x0..y * w + x0 + b] {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if lo > 0.0 && hi > 0.0 {
            val += (hi / lo).ln();
        }
    }
    2.0 / n as f64 * val
}

fn uism(v: &[f64], h: usize, w: usize) -> f64 {
    (0..3)
        .map(|c| {
            let ch: Vec<f64> = v.iter().skip(c).step_by(3).copied().collect();
            let mut mag = sobel_magnitude(&ch, h, w);
            let peak = mag.iter().copied().fold(0.0, f64::max);
            if peak == 0.0 {
                return 0.0;
            }
            mag.iter_mut().zip(&ch).for_each(|(m, x)| *m = *m * 255.0 / peak * x);
            LUMA[c] * eme(&mag, h, w, UIQM_BLOCK)
        })
        .sum()
}

/// logAMEE: `−1/(k1 k2) Σ r ln r` with `r = (max − min)/(max + min)` over joint RGB blocks.
fn uiconm(v: &[f64], h: usize, w: usize) -> f64 {
    let b = UIQM_BLOCK;
    let n = (h / b) * (w / b);
    if n == 0 {
        return 0.0;
    }
    let mut val = 0.0;
    for (y0, x0) in blocks(h, w, b) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y0 + b {
            for v in &v[(y * w + x0) * 3..(y * w + x0 + b) * 3] {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        let (top, bot) = (hi - lo, hi + lo);
        if top > 0.0 && bot > 0.0 {
            let r = top / bot;
            val += r * r.ln();
        }
    }
    -val / n as f64
}

/// UIQM terms on the 0–255 scale.
pub fn uiqm_parts<T: Scalar>(img: &ImagePlane<T>) -> Result<UiqmParts> {
    check_rgb(img)?;
    let v: Vec<f64> = values(img).into_iter().map(|x| x * 255.0).collect();
    let (h, w) = (img.height(), img.width());
    Ok(UiqmParts { uicm: uicm(&v), uism: uism(&v, h, w), uiconm: uiconm(&v, h, w) })
}

pub fn uiqm<T: Scalar>(img: &ImagePlane<T>) -> Result<f64> {
    Ok(uiqm_parts(img)?.total())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub image: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
}

impl MetricRow {
    /// All four metrics, or only the no-reference ones without `gt`.
    pub fn compute<T: Scalar>(name: &str, img: &ImagePlane<T>, gt: Option<&ImagePlane<T>>) -> Result<Self> {
        let (psnr, ssim) = match gt {
            Some(gt) => (Some(psnr(img, gt, 1.0)?), Some(ssim(img, gt)?)),
            None => (None, None),
        };
        Ok(Self { image: name.to_string(), psnr, ssim, uciqe: uciqe(img)?, uiqm: uiqm(img)? })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

impl MetricReport {
    /// Column means `(psnr, ssim, uciqe, uiqm)`; reference columns only over rows that have them.
    pub fn means(&self) -> [Option<f64>; 4] {
        [
            mean(self.rows.iter().filter_map(|r| r.psnr)),
            mean(self.rows.iter().filter_map(|r| r.ssim)),
            mean(self.rows.iter().map(|r| r.uciqe)),
            mean(self.rows.iter().map(|r| r.uiqm)),
        ]
    }

    /// `image,psnr,ssim,uciqe,uiqm` rows plus a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim,uciqe,uiqm\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.image,
                fmt(r.psnr),
                fmt(r.ssim),
                fmt(Some(r.uciqe)),
                fmt(Some(r.uiqm))
            );
        }
        let m = self.means();
        let _ = writeln!(s, "mean,{},{},{},{}", fmt(m[0]), fmt(m[1]), fmt(m[2]), fmt(m[3]));
        s
    }
}
