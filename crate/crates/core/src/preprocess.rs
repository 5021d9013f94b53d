//! Geometric normalization and the hair classification/removal sub-pipeline.
//!
//! Images are padded to square by edge replication, resized bilinearly, and
//! optionally run through a stroke detector (morphological blackhat on luma)
//! followed by neighborhood inpainting. Masks follow the same geometry with
//! nearest-neighbor resampling.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageRecord, Stage};
use crate::error::{Error, Result};
use crate::nets::HairNet;
use crate::raster::{self, BitMask, Rgb8};
use crate::scalar::Scalar;

/// Outcome of the hair classifier for one image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HairVerdict {
    pub image_id: String,
    pub hairy: bool,
    /// Calibrated score in [0, 1]; `hairy == (score >= threshold)`.
    pub score: f64,
}

/// Detected stroke pixels and their share of the image.
#[derive(Clone, Debug)]
pub struct HairMask {
    pub mask: BitMask,
    pub coverage: f64,
}

impl HairMask {
    pub fn new(mask: BitMask) -> Self {
        let coverage = raster::mask_coverage(&mask);
        HairMask { mask, coverage }
    }
}

/// Pad to `max(H, W)` square, centering the original pixels and replicating
/// edge rows/columns outward. Odd remainders split floor/ceil between the
/// leading and trailing side.
pub fn pad_to_square(img: &Rgb8) -> Result<Rgb8> {
    let (h, w, _) = img.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyRaster);
    }
    let side = h.max(w);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let out = Array3::from_shape_fn((side, side, 3), |(i, j, c)| {
        let src_i = i.saturating_sub(top).min(h - 1);
        let src_j = j.saturating_sub(left).min(w - 1);
        img[(src_i, src_j, c)]
    });
    Ok(out)
}

/// Mask analogue of [`pad_to_square`], replicating edge values.
pub fn pad_mask_to_square(mask: &BitMask) -> Result<BitMask> {
    let (h, w) = mask.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyRaster);
    }
    let side = h.max(w);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    Ok(Array2::from_shape_fn((side, side), |(i, j)| {
        mask[(
            i.saturating_sub(top).min(h - 1),
            j.saturating_sub(left).min(w - 1),
        )]
    }))
}

/// Bilinear resize of a square raster to `side`x`side` (half-pixel centers,
/// so resizing to the input side is the identity).
pub fn resize(img: &Rgb8, side: usize) -> Result<Rgb8> {
    let (h, w, _) = img.dim();
    if h != w {
        return Err(Error::NonSquare { h, w });
    }
    if side < 1 {
        return Err(Error::BadSide(side));
    }
    if h == 0 {
        return Err(Error::EmptyRaster);
    }
    let scale = h as f64 / side as f64;
    let coords: Vec<(usize, usize, f64)> = (0..side)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(h - 1);
            let hi = (lo + 1).min(h - 1);
            (lo, hi, src - lo as f64)
        })
        .collect();
    let out = Array3::from_shape_fn((side, side, 3), |(i, j, c)| {
        let (y0, y1, fy) = coords[i];
        let (x0, x1, fx) = coords[j];
        let v00 = f64::from(img[(y0, x0, c)]);
        let v01 = f64::from(img[(y0, x1, c)]);
        let v10 = f64::from(img[(y1, x0, c)]);
        let v11 = f64::from(img[(y1, x1, c)]);
        let v = v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx;
        v.round().clamp(0.0, 255.0) as u8
    });
    Ok(out)
}

/// Nearest-neighbor resize for binary masks.
pub fn resize_mask(mask: &BitMask, side: usize) -> Result<BitMask> {
    let (h, w) = mask.dim();
    if h != w {
        return Err(Error::NonSquare { h, w });
    }
    if side < 1 {
        return Err(Error::BadSide(side));
    }
    let scale = h as f64 / side as f64;
    let idx: Vec<usize> = (0..side)
        .map(|o| (((o as f64 + 0.5) * scale - 0.5).round().max(0.0) as usize).min(h - 1))
        .collect();
    Ok(Array2::from_shape_fn((side, side), |(i, j)| {
        mask[(idx[i], idx[j])]
    }))
}

/// Tuning knobs for the stroke detector.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HairRemovalParams {
    /// Disk structuring-element radius; defaults to `max(2, side / 60)`.
    pub se_radius: Option<usize>,
    /// Mask threshold at `mean + threshold_sigma * stddev` of the blackhat
    /// response.
    pub threshold_sigma: f64,
}

impl Default for HairRemovalParams {
    fn default() -> Self {
        HairRemovalParams {
            se_radius: None,
            threshold_sigma: 2.0,
        }
    }
}

/// Remove dark curvilinear structures.
///
/// Blackhat (morphological closing minus the image) on the luma channel is
/// thresholded into a [`HairMask`]; masked pixels are replaced by iterative
/// neighborhood inpainting. Pixels outside the mask are never modified.
pub fn remove_hair(img: &Rgb8, params: &HairRemovalParams) -> (Rgb8, HairMask) {
    let (h, w, _) = img.dim();
    let radius = params.se_radius.unwrap_or_else(|| (h.min(w) / 60).max(2));
    let lum = raster::luminance(img);
    let response = blackhat(&lum, radius);
    let n = (h * w) as f64;
    let mean = response.sum() / n;
    let var = response.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    let threshold = mean + params.threshold_sigma * var.sqrt();
    let mask = response.mapv(|v| v > threshold);
    let hair_mask = HairMask::new(mask);
    if hair_mask.coverage == 0.0 {
        return (img.clone(), hair_mask);
    }
    let out = inpaint(img, &hair_mask.mask);
    (out, hair_mask)
}

/// Grayscale closing (dilate then erode) minus the input; nonnegative, large
/// on dark structures thinner than the structuring element.
fn blackhat(lum: &Array2<f64>, radius: usize) -> Array2<f64> {
    let offsets = disk_offsets(radius);
    let dilated = morph(lum, &offsets, true);
    let closed = morph(&dilated, &offsets, false);
    closed - lum
}

fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn morph(src: &Array2<f64>, offsets: &[(i64, i64)], max_mode: bool) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = if max_mode { f64::MIN } else { f64::MAX };
        for &(dy, dx) in offsets {
            let y = i as i64 + dy;
            let x = j as i64 + dx;
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            let v = src[(y as usize, x as usize)];
            acc = if max_mode { acc.max(v) } else { acc.min(v) };
        }
        acc
    })
}

/// Fill masked pixels from their unmasked 8-neighborhood, sweeping inward in
/// passes; each pass reads only the previous pass's state so the result is
/// independent of pixel visit order.
fn inpaint(img: &Rgb8, mask: &BitMask) -> Rgb8 {
    let (h, w, _) = img.dim();
    let mut out = img.clone();
    let mut remaining = mask.clone();
    let mut open: usize = remaining.iter().filter(|&&m| m).count();
    while open > 0 {
        let snapshot = out.clone();
        let known = remaining.clone();
        let mut progressed = false;
        for i in 0..h {
            for j in 0..w {
                if !known[(i, j)] {
                    continue;
                }
                let mut sum = [0u32; 3];
                let mut cnt = 0u32;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let y = i as i64 + dy;
                        let x = j as i64 + dx;
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        if known[(y as usize, x as usize)] {
                            continue;
                        }
                        for c in 0..3 {
                            sum[c] += u32::from(snapshot[(y as usize, x as usize, c)]);
                        }
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    for c in 0..3 {
                        out[(i, j, c)] =
                            ((f64::from(sum[c]) / f64::from(cnt)).round()).clamp(0.0, 255.0) as u8;
                    }
                    remaining[(i, j)] = false;
                    open -= 1;
                    progressed = true;
                }
            }
        }
        if !progressed {
            break; // fully masked image; nothing to anchor the fill
        }
    }
    out
}

/// Score an image with the hair classifier. Errors if the model is untrained.
pub fn classify_hair<F: Scalar>(
    img: &Rgb8,
    model: &HairNet<F>,
    threshold: f64,
    image_id: &str,
) -> Result<HairVerdict> {
    if !model.is_trained() {
        return Err(Error::UntrainedModel);
    }
    let side = model.input_side();
    let (h, w, _) = img.dim();
    let sized = if (h, w) == (side, side) {
        img.clone()
    } else {
        resize(&pad_to_square(img)?, side)?
    };
    let batch = raster::batch_input::<F>(std::slice::from_ref(&sized))?;
    // Inference needs scratch caches; work on a private clone so the shared
    // model stays read-only.
    let mut scratch = model.clone();
    let score = scratch.scores(&batch)[0].to_f64().unwrap_or(0.0);
    Ok(HairVerdict {
        image_id: image_id.to_string(),
        hairy: score >= threshold,
        score,
    })
}

/// Options for [`preprocess_manifest`].
pub struct PreprocessOptions<'a, F: Scalar> {
    pub side: usize,
    pub hair_model: Option<&'a HairNet<F>>,
    pub hair_threshold: f64,
    /// Apply hair removal to every image regardless of classifier verdict.
    pub force_hair_removal: bool,
    pub removal: HairRemovalParams,
}

impl<F: Scalar> PreprocessOptions<'_, F> {
    pub fn plain(side: usize) -> Self {
        PreprocessOptions {
            side,
            hair_model: None,
            hair_threshold: 0.5,
            force_hair_removal: false,
            removal: HairRemovalParams::default(),
        }
    }
}

/// Pad, optionally de-hair, and resize every record; writes outputs under
/// `out_dir/images` and returns the new manifest plus per-image verdicts.
pub fn preprocess_manifest<F: Scalar>(
    manifest: &DatasetManifest,
    out_dir: &Path,
    opts: &PreprocessOptions<F>,
) -> Result<(DatasetManifest, Vec<HairVerdict>)> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut out = DatasetManifest::new(manifest.kind, manifest.seed, out_dir);
    out.mask_suffix = manifest.mask_suffix.clone();
    let mut verdicts = Vec::new();
    for rec in &manifest.records {
        let img = manifest.load_pixels(rec)?;
        let padded = pad_to_square(&img)?;
        let verdict = match opts.hair_model {
            Some(model) => Some(classify_hair(&padded, model, opts.hair_threshold, &rec.id)?),
            None => None,
        };
        let apply_removal =
            opts.force_hair_removal || verdict.as_ref().map(|v| v.hairy).unwrap_or(false);
        let (cleaned, stage) = if apply_removal {
            let (cleaned, _mask) = remove_hair(&padded, &opts.removal);
            (cleaned, Stage::HairRemoved)
        } else {
            (padded, Stage::Resized)
        };
        let final_img = resize(&cleaned, opts.side)?;
        let img_rel = PathBuf::from(format!("images/{}.png", rec.id));
        raster::save_rgb8(&out_dir.join(&img_rel), &final_img)?;

        let mask_rel = match manifest.load_mask(rec)? {
            Some(mask) => {
                let sized = resize_mask(&pad_mask_to_square(&mask)?, opts.side)?;
                let rel = PathBuf::from(format!("images/{}{}.png", rec.id, manifest.mask_suffix));
                raster::save_mask(&out_dir.join(&rel), &sized)?;
                Some(rel)
            }
            None => None,
        };

        let mut new_rec = ImageRecord::new(rec.id.clone(), img_rel);
        new_rec.label = rec.label;
        new_rec.stage = stage;
        new_rec.mask = mask_rel;
        new_rec.hairy = verdict.as_ref().map(|v| v.hairy).or(rec.hairy);
        out.records.push(new_rec);
        if let Some(v) = verdict {
            verdicts.push(v);
        }
    }
    Ok((out, verdicts))
}

/// One verdict per line: `id<TAB>score<TAB>hairy`.
pub fn write_verdict_log(path: &Path, verdicts: &[HairVerdict]) -> Result<()> {
    let mut text = String::from("id\tscore\thairy\n");
    for v in verdicts {
        text.push_str(&format!("{}\t{:.6}\t{}\n", v.image_id, v.score, v.hairy));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
