//! Deterministic class-conditional augmentation.
//!
//! Every labeled record expands into exactly 8 variants (rotations x
//! {none, vertical flip}) or, for the two rarest classes DF and VASC, 12
//! (adding rotations x horizontal flip). Transforms are exact pixel
//! permutations: flip first, then rotate. The 12-transform set contains
//! group-level duplicate reflections on purpose; none are deduplicated
//! because downstream counts depend on all 12 being emitted.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::dataset::{ClassLabel, DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::raster::{self, Rgb8};

/// Quarter-turn rotation, counterclockwise.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    fn degrees(self) -> u16 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Flip {
    None,
    /// Reverse row order (flip about the horizontal axis).
    Vertical,
    /// Reverse column order (flip about the vertical axis).
    Horizontal,
}

/// One element of the augmentation set: flip applied first, then rotation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TransformId {
    pub rotation: Rotation,
    pub flip: Flip,
}

impl TransformId {
    pub const IDENTITY: TransformId = TransformId {
        rotation: Rotation::R0,
        flip: Flip::None,
    };

    /// Canonical id suffix, grammar `_r{0,90,180,270}{,_fv,_fh}`.
    pub fn tag(&self) -> String {
        let flip = match self.flip {
            Flip::None => "",
            Flip::Vertical => "_fv",
            Flip::Horizontal => "_fh",
        };
        format!("_r{}{}", self.rotation.degrees(), flip)
    }
}

/// The 8-transform standard set: rotations x {none, vertical}.
pub fn standard_set() -> Vec<TransformId> {
    let mut out = Vec::with_capacity(8);
    for flip in [Flip::None, Flip::Vertical] {
        for rotation in Rotation::ALL {
            out.push(TransformId { rotation, flip });
        }
    }
    out
}

/// The 12-transform extended set: the standard set plus rotations x
/// horizontal flip.
pub fn extended_set() -> Vec<TransformId> {
    let mut out = standard_set();
    for rotation in Rotation::ALL {
        out.push(TransformId {
            rotation,
            flip: Flip::Horizontal,
        });
    }
    out
}

/// Transform set for a class: extended for DF and VASC, standard otherwise.
pub fn transforms_for(label: ClassLabel) -> Vec<TransformId> {
    match label {
        ClassLabel::Df | ClassLabel::Vasc => extended_set(),
        _ => standard_set(),
    }
}

/// Apply one transform to a square raster as an exact pixel permutation.
pub fn apply(img: &Rgb8, t: TransformId) -> Result<Rgb8> {
    let (h, w, _) = img.dim();
    if h != w {
        return Err(Error::NonSquare { h, w });
    }
    let n = h;
    let flipped = |i: usize, j: usize| -> (usize, usize) {
        match t.flip {
            Flip::None => (i, j),
            Flip::Vertical => (n - 1 - i, j),
            Flip::Horizontal => (i, n - 1 - j),
        }
    };
    // Counterclockwise rotation: out[i][j] = in[j][n-1-i] for one quarter turn.
    let rotated = |i: usize, j: usize| -> (usize, usize) {
        match t.rotation {
            Rotation::R0 => (i, j),
            Rotation::R90 => (j, n - 1 - i),
            Rotation::R180 => (n - 1 - i, n - 1 - j),
            Rotation::R270 => (n - 1 - j, i),
        }
    };
    Ok(Array3::from_shape_fn((n, n, 3), |(i, j, c)| {
        let (ri, rj) = rotated(i, j);
        let (si, sj) = flipped(ri, rj);
        img[(si, sj, c)]
    }))
}

/// Expand one labeled record into its transform variants (metadata only; ids
/// are suffixed with the transform tag and sorted by tag).
pub fn expand(record: &ImageRecord) -> Result<Vec<(TransformId, ImageRecord)>> {
    let label = record
        .label
        .ok_or_else(|| Error::UnlabeledRecord(record.id.clone()))?;
    let mut transforms = transforms_for(label);
    transforms.sort_by_key(|t| t.tag());
    Ok(transforms
        .into_iter()
        .map(|t| {
            let id = format!("{}{}", record.id, t.tag());
            let mut rec = ImageRecord::new(id.clone(), PathBuf::from(format!("images/{id}.png")));
            rec.label = Some(label);
            rec.stage = record.stage;
            rec.hairy = record.hairy;
            (t, rec)
        })
        .collect())
}

/// Expand a whole manifest, writing transformed pixels under
/// `out_dir/images`. Output records are ordered by (source id, transform
/// tag); sources are processed in manifest order.
pub fn expand_manifest(manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut out = DatasetManifest::new(manifest.kind, manifest.seed, out_dir);
    out.mask_suffix = manifest.mask_suffix.clone();
    for rec in &manifest.records {
        let variants = expand(rec)?;
        let img = manifest.load_pixels(rec)?;
        for (t, new_rec) in variants {
            let pixels = apply(&img, t)?;
            raster::save_rgb8(&out_dir.join(&new_rec.path), &pixels)?;
            out.records.push(new_rec);
        }
    }
    Ok(out)
}

/// Expected size of an expanded manifest given per-class counts.
pub fn expanded_count(class_counts: &[usize; ClassLabel::COUNT]) -> usize {
    ClassLabel::ALL
        .iter()
        .map(|&label| transforms_for(label).len() * class_counts[label.index()])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_raster(rng: &mut ChaCha20Rng, n: usize) -> Rgb8 {
        Array3::from_shape_fn((n, n, 3), |_| rng.gen())
    }

    #[test]
    fn identity_transform_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let img = random_raster(&mut rng, 6);
        assert_eq!(apply(&img, TransformId::IDENTITY).unwrap(), img);
    }

    #[test]
    fn rot90_ccw_on_2x2_hand_permutation() {
        // [[a,b],[c,d]] rotated 90 degrees counterclockwise -> [[b,d],[a,c]]
        let (a, b, c, d) = (10u8, 20, 30, 40);
        let mut img = Array3::<u8>::zeros((2, 2, 3));
        for ch in 0..3 {
            img[(0, 0, ch)] = a;
            img[(0, 1, ch)] = b;
            img[(1, 0, ch)] = c;
            img[(1, 1, ch)] = d;
        }
        let out = apply(
            &img,
            TransformId {
                rotation: Rotation::R90,
                flip: Flip::None,
            },
        )
        .unwrap();
        assert_eq!(out[(0, 0, 0)], b);
        assert_eq!(out[(0, 1, 0)], d);
        assert_eq!(out[(1, 0, 0)], a);
        assert_eq!(out[(1, 1, 0)], c);
    }

    #[test]
    fn group_laws_on_random_rasters() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(2..9);
            let img = random_raster(&mut rng, n);
            // Four quarter turns = identity.
            let r = TransformId {
                rotation: Rotation::R90,
                flip: Flip::None,
            };
            let mut turned = img.clone();
            for _ in 0..4 {
                turned = apply(&turned, r).unwrap();
            }
            assert_eq!(turned, img);
            // Flips are involutions.
            for flip in [Flip::Vertical, Flip::Horizontal] {
                let f = TransformId {
                    rotation: Rotation::R0,
                    flip,
                };
                assert_eq!(apply(&apply(&img, f).unwrap(), f).unwrap(), img);
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        let img = Array3::<u8>::zeros((2, 3, 3));
        assert!(matches!(
            apply(&img, TransformId::IDENTITY),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn tag_grammar() {
        let tags: Vec<String> = extended_set().iter().map(|t| t.tag()).collect();
        let expect = [
            "_r0", "_r90", "_r180", "_r270", "_r0_fv", "_r90_fv", "_r180_fv", "_r270_fv", "_r0_fh",
            "_r90_fh", "_r180_fh", "_r270_fh",
        ];
        assert_eq!(tags, expect);
        assert_eq!(
            &tags[..8],
            &standard_set().iter().map(|t| t.tag()).collect::<Vec<_>>()[..]
        );
    }

    #[test]
    fn expand_multiplicity_by_label() {
        for label in ClassLabel::ALL {
            let mut rec = ImageRecord::new("x", "x.png");
            rec.label = Some(label);
            let n = expand(&rec).unwrap().len();
            if matches!(label, ClassLabel::Df | ClassLabel::Vasc) {
                assert_eq!(n, 12, "{label}");
            } else {
                assert_eq!(n, 8, "{label}");
            }
        }
        let unlabeled = ImageRecord::new("y", "y.png");
        assert!(matches!(expand(&unlabeled), Err(Error::UnlabeledRecord(_))));
    }

    #[test]
    fn extended_set_keeps_duplicate_reflections() {
        // Group-level: horizontal flip then R180 equals vertical flip, so a
        // symmetric-enough raster collapses; the emitted set still has 12.
        assert_eq!(extended_set().len(), 12);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let img = random_raster(&mut rng, 5);
        let fv = apply(
            &img,
            TransformId {
                rotation: Rotation::R180,
                flip: Flip::Horizontal,
            },
        )
        .unwrap();
        let v = apply(
            &img,
            TransformId {
                rotation: Rotation::R0,
                flip: Flip::Vertical,
            },
        )
        .unwrap();
        assert_eq!(fv, v);
    }

    #[test]
    fn reference_balanced_counts_expand_to_19940() {
        // Balanced per-class training counts, canonical order
        // MEL, NV, BCC, AKIEC, BKL, DF, VASC.
        let counts = [463, 463, 463, 294, 463, 103, 128];
        assert_eq!(expanded_count(&counts), 8 * 2146 + 12 * 231);
        assert_eq!(expanded_count(&counts), 19_940);
        assert_eq!(expanded_count(&[0; 7]), 0);
        let mut one_vasc = [0; 7];
        one_vasc[ClassLabel::Vasc.index()] = 1;
        assert_eq!(expanded_count(&one_vasc), 12);
    }

    #[test]
    fn expand_manifest_writes_ordered_records() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        let mut manifest = DatasetManifest::new(crate::dataset::DatasetKind::Synthetic, 0, &src);
        // Constant-color DF record: 12 outputs, all pixel-identical.
        let img = Array3::from_elem((4, 4, 3), 77u8);
        raster::save_rgb8(&src.join("df0.png"), &img).unwrap();
        let mut rec = ImageRecord::new("df0", "df0.png");
        rec.label = Some(ClassLabel::Df);
        manifest.records.push(rec);

        let out_dir = dir.path().join("aug");
        let out = expand_manifest(&manifest, &out_dir).unwrap();
        assert_eq!(out.len(), 12);
        let mut tags: Vec<String> = out
            .records
            .iter()
            .map(|r| r.id.trim_start_matches("df0").to_string())
            .collect();
        let sorted = {
            let mut s = tags.clone();
            s.sort();
            s
        };
        assert_eq!(tags, sorted);
        tags.dedup();
        assert_eq!(tags.len(), 12);
        for rec in &out.records {
            let pixels = out.load_pixels(rec).unwrap();
            assert_eq!(pixels, img, "constant raster is D4-invariant");
            assert_eq!(rec.label, Some(ClassLabel::Df));
        }
    }
}
