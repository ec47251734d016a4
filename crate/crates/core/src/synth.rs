//! Synthetic clean scenes and underwater-style corruptions for smoke runs.

use std::f64::consts::TAU;

use rand::Rng;

use crate::autograd::shape::box_blur_tensor;
use crate::error::Result;
use crate::image::ImagePlane;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Smooth random scene: a colour gradient plus a few soft blobs and stripes.
pub fn scene<T: Scalar, R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Result<ImagePlane<T>> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
                std::array::from_fn(|_| rng.random_range(-0.35..0.35)),
            )
        })
        .collect();
    let (fy, fx, phase) = (rng.random_range(2.0..6.0), rng.random_range(2.0..6.0), rng.random_range(0.0..TAU));
    let data = Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
        let (v, u) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut val = base[c] + grad[c][0] * (v - 0.5) + grad[c][1] * (u - 0.5);
        for (by, bx, r, amp) in &blobs {
            let d2 = ((v - by).powi(2) + (u - bx).powi(2)) / (r * r);
            val += amp[c] * (-d2).exp();
        }
        val += 0.08 * (fy * v * TAU + fx * u * TAU + phase).sin();
        lit(val.clamp(0.0, 1.0))
    });
    ImagePlane::unit(data)
}

/// Wavelength-dependent attenuation toward a blue-green veil.
pub fn color_cast<T: Scalar>(img: &ImagePlane<T>, strength: f64) -> Result<ImagePlane<T>> {
    const TRANSMISSION: [f64; 3] = [0.35, 0.8, 0.9];
    const VEIL: [f64; 3] = [0.05, 0.45, 0.55];
    let out = Tensor::from_fn(img.tensor().shape(), |i| {
        let c = i % 3;
        let t = 1.0 - strength * (1.0 - TRANSMISSION[c]);
        let v = img.tensor().data()[i].to_f64_lossy();
        lit((v * t + VEIL[c] * (1.0 - t)).clamp(0.0, 1.0))
    });
    ImagePlane::unit(out)
}

/// Box blur of the given radius.
pub fn blur<T: Scalar>(img: &ImagePlane<T>, radius: usize) -> Result<ImagePlane<T>> {
    let out = box_blur_tensor(&img.to_batch(), radius).index_first(0);
    ImagePlane::unit(out.map(|v| v.max(T::zero()).min(T::one())))
}

/// Colour cast followed by a mild blur (a generic underwater look).
pub fn underwater<T: Scalar>(img: &ImagePlane<T>) -> Result<ImagePlane<T>> {
    blur(&color_cast(img, 0.8)?, 1)
}
