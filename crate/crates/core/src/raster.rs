//! 8-bit RGB rasters and binary masks, with PNG/JPEG io.
//!
//! Images are `(H, W, 3)` arrays of u8, masks `(H, W)` arrays of bool.
//! Masks are binarized on load at half of the channel maximum.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// RGB raster, shape `(H, W, 3)`.
pub type Rgb8 = Array3<u8>;

/// Binary mask, shape `(H, W)`.
pub type BitMask = Array2<bool>;

pub fn load_rgb8(path: &Path) -> Result<Rgb8> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), raw)
        .expect("decoded buffer matches dimensions"))
}

pub fn save_rgb8(path: &Path, img: &Rgb8) -> Result<()> {
    let (h, w, c) = img.dim();
    assert_eq!(c, 3, "rgb raster must have 3 channels");
    let data = img
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec();
    let buf: RgbImage =
        RgbImage::from_raw(w as u32, h as u32, data).expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Load a grayscale mask, binarizing at half of the channel maximum (>= 128).
pub fn load_mask(path: &Path) -> Result<BitMask> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let gray = Array2::from_shape_vec((h as usize, w as usize), raw)
        .expect("decoded buffer matches dimensions");
    Ok(gray.mapv(|v| v >= 128))
}

pub fn save_mask(path: &Path, mask: &BitMask) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf =
        GrayImage::from_raw(w as u32, h as u32, data).expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Image dimensions `(H, W)` without decoding pixel data.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::image(path, e))?;
    Ok((h as usize, w as usize))
}

/// Rec. 601 luma in f64, `(H, W)`.
pub fn luminance(img: &Rgb8) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * f64::from(img[(i, j, 0)])
            + 0.587 * f64::from(img[(i, j, 1)])
            + 0.114 * f64::from(img[(i, j, 2)])
    })
}

pub fn mask_coverage(mask: &BitMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Convert to a network input tensor `(3, H, W)` scaled to [0, 1].
pub fn to_input<F: Scalar>(img: &Rgb8) -> Array3<F> {
    let (h, w, _) = img.dim();
    let scale = F::from(1.0 / 255.0).unwrap();
    Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        F::from(img[(i, j, c)]).unwrap() * scale
    })
}

/// Stack images into a batch tensor `(N, 3, H, W)`; all must share dimensions.
pub fn batch_input<F: Scalar>(imgs: &[Rgb8]) -> Result<Array4<F>> {
    if imgs.is_empty() {
        return Ok(Array4::zeros((0, 3, 0, 0)));
    }
    let (h, w, _) = imgs[0].dim();
    let mut out = Array4::zeros((imgs.len(), 3, h, w));
    for (n, img) in imgs.iter().enumerate() {
        if img.dim() != (h, w, 3) {
            return Err(Error::ShapeMismatch(format!(
                "image {} is {:?}, expected ({}, {}, 3)",
                n,
                img.dim(),
                h,
                w
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), n)
            .assign(&to_input(img));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mask_roundtrip_and_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let mask = array![[true, false], [false, true]];
        let path = dir.path().join("m.png");
        save_mask(&path, &mask).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(mask, back);
        assert_eq!(mask_coverage(&mask), 0.5);
    }

    #[test]
    fn rgb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 5, 3), |(i, j, c)| (i * 50 + j * 9 + c * 3) as u8);
        let path = dir.path().join("i.png");
        save_rgb8(&path, &img).unwrap();
        assert_eq!(load_rgb8(&path).unwrap(), img);
        assert_eq!(image_dims(&path).unwrap(), (3, 5));
    }
}
