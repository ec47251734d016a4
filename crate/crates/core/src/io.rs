//! PNG reading and writing.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{invalid, Error, Result};
use crate::image::{DepthRaster, ImagePlane};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Decodes any supported image to a unit-interval RGB plane.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<ImagePlane<T>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    rgb_from_dynamic(img)
}

pub fn decode_rgb<T: Scalar>(bytes: &[u8]) -> Result<ImagePlane<T>> {
    let img = image::load_from_memory(bytes).map_err(|e| image_err(Path::new("<memory>"), e))?;
    rgb_from_dynamic(img)
}

fn rgb_from_dynamic<T: Scalar>(img: image::DynamicImage) -> Result<ImagePlane<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().bytes_per_pixel() / img.color().channel_count() > 1 {
        let buf = img.into_rgb16();
        let data = buf.into_raw().into_iter().map(|v| T::from_f64_lossy(v as f64 / 65535.0)).collect();
        return ImagePlane::unit(Tensor::new(vec![h, w, 3], data)?);
    }
    let buf = img.into_rgb8();
    let data = buf.into_raw().into_iter().map(|v| T::from_f64_lossy(v as f64 / 255.0)).collect();
    ImagePlane::unit(Tensor::new(vec![h, w, 3], data)?)
}

/// 8-bit quantization used for every written image.
pub fn quantize_u8<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB plane as an 8-bit PNG via a temporary file and rename.
pub fn save_rgb<T: Scalar>(img: &ImagePlane<T>, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(invalid(format!("expected 3 channels, got {}", img.channels())));
    }
    let raw: Vec<u8> = img.tensor().data().iter().map(|&v| quantize_u8(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size");
    write_atomic(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png))
}

/// Reads a single-channel image as raw values in `[0, 65535]`.
pub fn load_gray16(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_luma16().into_raw().into_iter().map(f64::from).collect();
    Tensor::new(vec![h, w], data)
}

/// Writes a depth raster as a 16-bit grayscale PNG.
pub fn save_gray16<T: Scalar>(depth: &DepthRaster<T>, path: &Path) -> Result<()> {
    let raw: Vec<u16> = depth
        .tensor()
        .data()
        .iter()
        .map(|&v| (v.to_f64_lossy().clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("buffer size");
    write_atomic(path, |tmp| buf.save_with_format(tmp, image::ImageFormat::Png))
}

fn write_atomic(
    path: &Path,
    write: impl FnOnce(&Path) -> image::ImageResult<()>,
) -> Result<()> {
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    write(&tmp).map_err(|e| image_err(path, e))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
