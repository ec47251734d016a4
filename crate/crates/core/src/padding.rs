//! Reflective padding to a size multiple and the matching crop.

use crate::error::{invalid, Result};
use crate::image::ImagePlane;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Original size of a padded image; empty when no padding was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CropRecord {
    pub original: Option<(usize, usize)>,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.original.is_none()
    }
}

/// Mirror index without repeating the edge sample (`… 2 1 | 0 1 2 … n-1 | n-2 …`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

pub fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Pads bottom and right by reflection so both sides become multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(img: &ImagePlane<T>, m: usize) -> Result<(ImagePlane<T>, CropRecord)> {
    if m != 8 && m != 16 {
        return Err(invalid(format!("padding multiple must be 8 or 16, got {m}")));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (ph, pw) = (padded_len(h, m), padded_len(w, m));
    if (ph, pw) == (h, w) {
        return Ok((img.clone(), CropRecord::default()));
    }
    let src = img.tensor().data();
    let mut out = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            let sx = reflect(x, w);
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    let padded = ImagePlane::new(Tensor::new(vec![ph, pw, c], out)?, img.domain())?;
    Ok((padded, CropRecord { original: Some((h, w)) }))
}

/// Undoes [`pad_to_multiple`].
pub fn crop<T: Scalar>(img: &ImagePlane<T>, record: &CropRecord) -> Result<ImagePlane<T>> {
    let Some((h, w)) = record.original else {
        return Ok(img.clone());
    };
    if h > img.height() || w > img.width() {
        return Err(invalid(format!(
            "crop {h}×{w} larger than image {}×{}",
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    let src = img.tensor().data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let base = y * img.width() * c;
        out.extend_from_slice(&src[base..base + w * c]);
    }
    ImagePlane::new(Tensor::new(vec![h, w, c], out)?, img.domain())
}
