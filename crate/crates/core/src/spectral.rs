//! Space-to-depth rearrangement and amplitude/phase spectra of image planes.

use rustfft::num_complex::Complex;

use crate::autograd::shape::{pixel_shuffle_tensor, pixel_unshuffle_tensor};
use crate::autograd::spectral::{complex_arg, fft2_in_place, real_to_complex, Direction};
use crate::error::{invalid, Result};
use crate::image::ImagePlane;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Per-channel amplitude and phase of a 2-D spectrum, each `[h, w, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPair<T> {
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
}

impl<T: Scalar> SpectralPair<T> {
    pub fn new(amplitude: Tensor<T>, phase: Tensor<T>) -> Result<Self> {
        if amplitude.shape() != phase.shape() || amplitude.rank() != 3 {
            return Err(invalid(format!(
                "amplitude {:?} and phase {:?} must share an [h, w, C] shape",
                amplitude.shape(),
                phase.shape()
            )));
        }
        if !amplitude.all_finite() || !phase.all_finite() {
            return Err(invalid("spectral pair has non-finite entries"));
        }
        Ok(Self { amplitude, phase })
    }
}

/// `[H, W, C] -> [H/r, W/r, C·r²]`.
pub fn pixel_unshuffle<T: Scalar>(img: &ImagePlane<T>, r: usize) -> Result<ImagePlane<T>> {
    if r == 0 || img.height() % r != 0 || img.width() % r != 0 {
        return Err(invalid(format!(
            "{}×{} is not divisible by {r}",
            img.height(),
            img.width()
        )));
    }
    let out = pixel_unshuffle_tensor(&img.to_batch(), r).index_first(0);
    ImagePlane::new(out, img.domain())
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(img: &ImagePlane<T>, r: usize) -> Result<ImagePlane<T>> {
    if r == 0 || img.channels() % (r * r) != 0 {
        return Err(invalid(format!("{} channels not divisible by {r}²", img.channels())));
    }
    let target = [1, img.height() * r, img.width() * r, img.channels() / (r * r)];
    let out = pixel_shuffle_tensor(&img.to_batch(), r, &target).index_first(0);
    ImagePlane::new(out, img.domain())
}

fn dims(img_shape: &[usize]) -> [usize; 4] {
    [1, img_shape[0], img_shape[1], img_shape[2]]
}

/// Per-channel 2-D DFT split into modulus and argument (`arg 0 = 0`).
pub fn fft_split<T: Scalar>(x: &ImagePlane<T>) -> Result<SpectralPair<T>> {
    if !x.tensor().all_finite() {
        return Err(invalid("fft_split input has non-finite entries"));
    }
    let shape = x.tensor().shape().to_vec();
    let mut z = real_to_complex(x.tensor().data());
    fft2_in_place(&mut z, dims(&shape), Direction::Forward);
    let amplitude = z.iter().map(|c| c.re.hypot(c.im)).collect();
    let phase = z.iter().map(|c| complex_arg(c.re, c.im)).collect();
    Ok(SpectralPair {
        amplitude: Tensor::new(shape.clone(), amplitude)?,
        phase: Tensor::new(shape, phase)?,
    })
}

/// Inverse transform of `amplitude · exp(i · phase)`, returning the real part
/// and the largest absolute imaginary residue.
pub fn ifft_merge_with_residue<T: Scalar>(s: &SpectralPair<T>) -> Result<(ImagePlane<T>, T)> {
    if s.amplitude.shape() != s.phase.shape() || s.amplitude.rank() != 3 {
        return Err(invalid("amplitude and phase shapes differ"));
    }
    let shape = s.amplitude.shape().to_vec();
    let mut z: Vec<Complex<T>> = s
        .amplitude
        .data()
        .iter()
        .zip(s.phase.data())
        .map(|(&a, &p)| Complex::new(a * p.cos(), a * p.sin()))
        .collect();
    fft2_in_place(&mut z, dims(&shape), Direction::Inverse);
    let inv_n: T = lit(1.0 / (shape[0] * shape[1]) as f64);
    let residue = z.iter().fold(T::zero(), |m, c| m.max((c.im * inv_n).abs()));
    let re = z.iter().map(|c| c.re * inv_n).collect();
    Ok((ImagePlane::feature(Tensor::new(shape, re)?)?, residue))
}

pub fn ifft_merge<T: Scalar>(s: &SpectralPair<T>) -> Result<ImagePlane<T>> {
    ifft_merge_with_residue(s).map(|(img, _)| img)
}
