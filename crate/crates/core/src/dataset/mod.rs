//! Image corpora as deterministic manifests.
//!
//! A manifest is an ordered list of image records (paths relative to the
//! manifest's directory) plus kind, seed and per-class counts. Manifests are
//! immutable after construction and safe to share across threads.

mod synth;

#[cfg(test)]
pub(crate) use synth::draw_strokes;
pub use synth::{generate_synthetic, mask_area, SynthSpec};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;

/// Default naming convention pairing a mask file with its image.
pub const DEFAULT_MASK_SUFFIX: &str = "_segmentation";

/// The seven disease classes in canonical axis order.
///
/// Every tensor axis, file header and confusion matrix uses this order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum ClassLabel {
    Mel = 0,
    Nv = 1,
    Bcc = 2,
    Akiec = 3,
    Bkl = 4,
    Df = 5,
    Vasc = 6,
}

impl ClassLabel {
    pub const COUNT: usize = 7;

    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::Mel,
        ClassLabel::Nv,
        ClassLabel::Bcc,
        ClassLabel::Akiec,
        ClassLabel::Bkl,
        ClassLabel::Df,
        ClassLabel::Vasc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::Mel => "MEL",
            ClassLabel::Nv => "NV",
            ClassLabel::Bcc => "BCC",
            ClassLabel::Akiec => "AKIEC",
            ClassLabel::Bkl => "BKL",
            ClassLabel::Df => "DF",
            ClassLabel::Vasc => "VASC",
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or(Error::ClassIndexOutOfRange(index))
    }

    pub fn from_code(code: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.code() == code)
            .ok_or_else(|| Error::UnknownClassCode(code.to_string()))
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = String::deserialize(d)?;
        ClassLabel::from_code(&code).map_err(serde::de::Error::custom)
    }
}

/// Preprocessing stage a record's pixels have reached.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Stage {
    Raw,
    Padded,
    Resized,
    HairRemoved,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Padded => "padded",
            Stage::Resized => "resized",
            Stage::HairRemoved => "hair-removed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Stage::Raw),
            "padded" => Ok(Stage::Padded),
            "resized" => Ok(Stage::Resized),
            "hair-removed" => Ok(Stage::HairRemoved),
            other => Err(Error::Manifest(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Classification,
    Segmentation,
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Classification => "classification",
            DatasetKind::Segmentation => "segmentation",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(DatasetKind::Classification),
            "segmentation" => Ok(DatasetKind::Segmentation),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Manifest(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// One image entry: unique id, relative paths, optional label/mask/flags.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ImageRecord {
    pub id: String,
    /// Image path relative to the manifest directory.
    pub path: PathBuf,
    pub label: Option<ClassLabel>,
    pub stage: Stage,
    /// Lesion mask path relative to the manifest directory.
    pub mask: Option<PathBuf>,
    /// Whether strokes/hair were detected (or synthesized) on this image.
    pub hairy: Option<bool>,
    /// Ground-truth stroke mask for synthetic images.
    pub stroke_mask: Option<PathBuf>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        ImageRecord {
            id: id.into(),
            path: path.into(),
            label: None,
            stage: Stage::Raw,
            mask: None,
            hairy: None,
            stroke_mask: None,
        }
    }
}

/// Ordered, seedable collection of image records.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub seed: u64,
    pub mask_suffix: String,
    pub records: Vec<ImageRecord>,
    /// Directory the record paths are relative to. Not serialized; derived
    /// from the manifest file location on read.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(kind: DatasetKind, seed: u64, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            kind,
            seed,
            mask_suffix: DEFAULT_MASK_SUFFIX.to_string(),
            records: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-class record counts in canonical class order.
    pub fn class_counts(&self) -> [usize; ClassLabel::COUNT] {
        let mut counts = [0usize; ClassLabel::COUNT];
        for rec in &self.records {
            if let Some(label) = rec.label {
                counts[label.index()] += 1;
            }
        }
        counts
    }

    /// Resolve a record-relative path against the manifest root.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_pixels(&self, rec: &ImageRecord) -> Result<raster::Rgb8> {
        raster::load_rgb8(&self.resolve(&rec.path))
    }

    pub fn load_mask(&self, rec: &ImageRecord) -> Result<Option<raster::BitMask>> {
        match &rec.mask {
            Some(m) => Ok(Some(raster::load_mask(&self.resolve(m))?)),
            None => Ok(None),
        }
    }

    /// Sort records lexicographically by id (the canonical manifest order).
    pub fn sort_by_id(&mut self) {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for rec in &self.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
        }
        Ok(())
    }

    /// Serialize to the structured-text manifest format.
    ///
    /// If `path` lies outside the manifest root, record paths are rebased so
    /// they stay relative to the file's directory.
    pub fn write(&self, path: &Path) -> Result<()> {
        let target_dir = path.parent().unwrap_or_else(|| Path::new("."));
        let rebase = target_dir != self.root.as_path();
        let mut out = String::new();
        out.push_str("dermpipe-manifest v1\n");
        out.push_str(&format!("kind\t{}\n", self.kind.as_str()));
        out.push_str(&format!("seed\t{}\n", self.seed));
        out.push_str(&format!("mask-suffix\t{}\n", self.mask_suffix));
        let counts = self.class_counts();
        for label in ClassLabel::ALL {
            out.push_str(&format!(
                "count\t{}\t{}\n",
                label.code(),
                counts[label.index()]
            ));
        }
        out.push_str(&format!("records\t{}\n", self.records.len()));
        out.push_str("id\tpath\tlabel\tstage\tmask\thairy\tstroke_mask\n");
        for rec in &self.records {
            let rebase_path = |p: &Path| -> Result<String> {
                let abs = self.root.join(p);
                let rel = if rebase {
                    relative_path(target_dir, &abs)?
                } else {
                    p.to_path_buf()
                };
                Ok(path_to_string(&rel))
            };
            let mask = match &rec.mask {
                Some(m) => rebase_path(m)?,
                None => "-".to_string(),
            };
            let stroke = match &rec.stroke_mask {
                Some(m) => rebase_path(m)?,
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                rec.id,
                rebase_path(&rec.path)?,
                rec.label.map_or("-".to_string(), |l| l.code().to_string()),
                rec.stage.as_str(),
                mask,
                rec.hairy.map_or("-".to_string(), |h| h.to_string()),
                stroke,
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Read a manifest file; the file's directory becomes the root. Validates
    /// unique ids and that the recorded class counts match the records.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "dermpipe-manifest v1" {
            return Err(Error::Manifest(format!("unsupported header '{header}'")));
        }
        let mut kind = None;
        let mut seed = None;
        let mut mask_suffix = DEFAULT_MASK_SUFFIX.to_string();
        let mut declared_counts = [0usize; ClassLabel::COUNT];
        let mut declared_records = None;
        for line in lines.by_ref() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["kind", k] => kind = Some(DatasetKind::parse(k)?),
                ["seed", s] => {
                    seed = Some(
                        s.parse::<u64>()
                            .map_err(|e| Error::Manifest(format!("bad seed '{s}': {e}")))?,
                    )
                }
                ["mask-suffix", m] => mask_suffix = (*m).to_string(),
                ["count", code, n] => {
                    let label = ClassLabel::from_code(code)?;
                    declared_counts[label.index()] = n
                        .parse()
                        .map_err(|e| Error::Manifest(format!("bad count '{n}': {e}")))?;
                }
                ["records", n] => {
                    declared_records =
                        Some(n.parse::<usize>().map_err(|e| {
                            Error::Manifest(format!("bad record count '{n}': {e}"))
                        })?);
                    break;
                }
                _ => return Err(Error::Manifest(format!("unexpected header line '{line}'"))),
            }
        }
        let n_records =
            declared_records.ok_or_else(|| Error::Manifest("missing records line".into()))?;
        let columns = lines.next().unwrap_or_default();
        if columns != "id\tpath\tlabel\tstage\tmask\thairy\tstroke_mask" {
            return Err(Error::Manifest(format!(
                "unexpected column line '{columns}'"
            )));
        }
        let mut manifest = DatasetManifest {
            kind: kind.ok_or_else(|| Error::Manifest("missing kind".into()))?,
            seed: seed.ok_or_else(|| Error::Manifest("missing seed".into()))?,
            mask_suffix,
            records: Vec::with_capacity(n_records),
            root,
        };
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Manifest(format!("bad record line '{line}'")));
            }
            let opt_path = |s: &str| (s != "-").then(|| PathBuf::from(s));
            manifest.records.push(ImageRecord {
                id: f[0].to_string(),
                path: PathBuf::from(f[1]),
                label: if f[2] == "-" {
                    None
                } else {
                    Some(ClassLabel::from_code(f[2])?)
                },
                stage: Stage::parse(f[3])?,
                mask: opt_path(f[4]),
                hairy: match f[5] {
                    "-" => None,
                    "true" => Some(true),
                    "false" => Some(false),
                    other => return Err(Error::Manifest(format!("bad hairy flag '{other}'"))),
                },
                stroke_mask: opt_path(f[6]),
            });
        }
        if manifest.records.len() != n_records {
            return Err(Error::Manifest(format!(
                "expected {n_records} records, found {}",
                manifest.records.len()
            )));
        }
        manifest.check_unique_ids()?;
        if manifest.class_counts() != declared_counts {
            return Err(Error::Manifest(
                "declared class counts do not match records".into(),
            ));
        }
        Ok(manifest)
    }
}

fn path_to_string(p: &Path) -> String {
    p.to_str().expect("utf-8 path").replace('\\', "/")
}

/// Lexical relative path from `from_dir` to `to`, without touching the
/// filesystem (keeps manifests byte-stable across machines).
pub fn relative_path(from_dir: &Path, to: &Path) -> Result<PathBuf> {
    let norm = |p: &Path| -> Vec<std::ffi::OsString> {
        let mut parts: Vec<std::ffi::OsString> = Vec::new();
        for c in p.components() {
            match c {
                Component::CurDir => {}
                Component::ParentDir => {
                    if parts.last().map(|s| s != "..").unwrap_or(false) {
                        parts.pop();
                    } else {
                        parts.push("..".into());
                    }
                }
                other => parts.push(other.as_os_str().to_os_string()),
            }
        }
        parts
    };
    let from = norm(from_dir);
    let to = norm(to);
    let common = from
        .iter()
        .zip(to.iter())
        .take_while(|(a, b)| a == b)
        .count();
    let mut rel = PathBuf::new();
    for _ in common..from.len() {
        rel.push("..");
    }
    for part in &to[common..] {
        rel.push(part);
    }
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    Ok(rel)
}

/// Ingest a classification corpus from a one-hot ground-truth table.
///
/// The table is CSV with a header `image,<code>,...` covering all seven class
/// codes, and exactly one positive indicator (> 0.5) per row. Records are
/// ordered lexicographically by id regardless of table order.
pub fn ingest_classification(root_dir: &Path, ground_truth: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(ground_truth).map_err(|e| Error::io(ground_truth, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Manifest("ground truth table is missing a header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != ClassLabel::COUNT + 1 {
        return Err(Error::Manifest(format!(
            "expected 8 columns in ground truth header, found {}",
            cols.len()
        )));
    }
    let col_labels: Vec<ClassLabel> = cols[1..]
        .iter()
        .map(|c| ClassLabel::from_code(c))
        .collect::<Result<_>>()?;
    {
        let mut seen: Vec<ClassLabel> = col_labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != ClassLabel::COUNT {
            return Err(Error::Manifest(
                "ground truth header must list each class code exactly once".into(),
            ));
        }
    }

    let mut manifest = DatasetManifest::new(DatasetKind::Classification, 0, root_dir);
    let mut seen_ids = BTreeSet::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != ClassLabel::COUNT + 1 {
            return Err(Error::Manifest(format!("bad ground truth row '{line}'")));
        }
        let id = fields[0].to_string();
        if !seen_ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let mut positives = Vec::new();
        for (value, label) in fields[1..].iter().zip(&col_labels) {
            let v: f64 = value
                .parse()
                .map_err(|e| Error::Manifest(format!("bad indicator '{value}' for '{id}': {e}")))?;
            if v > 0.5 {
                positives.push(*label);
            }
        }
        if positives.len() != 1 {
            return Err(Error::BadGroundTruthRow {
                id,
                positives: positives.len(),
            });
        }
        let rel = find_image_file(root_dir, &id)?;
        let mut rec = ImageRecord::new(id, rel);
        rec.label = Some(positives[0]);
        manifest.records.push(rec);
    }
    manifest.sort_by_id();
    Ok(manifest)
}

fn find_image_file(root: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let rel = PathBuf::from(format!("{id}.{ext}"));
        if root.join(&rel).is_file() {
            return Ok(rel);
        }
    }
    Err(Error::MissingImage {
        id: id.to_string(),
        root: root.to_path_buf(),
    })
}

/// Ingest a segmentation corpus: every image in `root_dir` must have a mask
/// named `<id><mask_suffix>.png` (or .jpg) beside it, at identical dimensions.
pub fn ingest_segmentation(root_dir: &Path, mask_suffix: &str) -> Result<DatasetManifest> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root_dir)
        .map_err(|e| Error::io(root_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png" | "jpg" | "jpeg")
                )
        })
        .collect();
    entries.sort();

    let mut manifest = DatasetManifest::new(DatasetKind::Segmentation, 0, root_dir);
    manifest.mask_suffix = mask_suffix.to_string();
    for path in entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if stem.ends_with(mask_suffix) {
            continue;
        }
        let mask_rel = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| PathBuf::from(format!("{stem}{mask_suffix}.{ext}")))
            .find(|rel| root_dir.join(rel).is_file())
            .ok_or_else(|| Error::MissingMask { id: stem.clone() })?;
        let (img_h, img_w) = raster::image_dims(&path)?;
        let (mask_h, mask_w) = raster::image_dims(&root_dir.join(&mask_rel))?;
        if (img_h, img_w) != (mask_h, mask_w) {
            return Err(Error::MaskDimMismatch {
                id: stem,
                img_h,
                img_w,
                mask_h,
                mask_w,
            });
        }
        let rel = PathBuf::from(path.file_name().unwrap());
        let mut rec = ImageRecord::new(stem, rel);
        rec.mask = Some(mask_rel);
        manifest.records.push(rec);
    }
    manifest.sort_by_id();
    manifest.check_unique_ids()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_png(path: &Path, h: usize, w: usize) {
        let img = ndarray::Array3::from_elem((h, w, 3), 100u8);
        raster::save_rgb8(path, &img).unwrap();
    }

    #[test]
    fn class_label_bijection() {
        for (i, label) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(label.index(), i);
            assert_eq!(ClassLabel::from_index(i).unwrap(), *label);
            assert_eq!(ClassLabel::from_code(label.code()).unwrap(), *label);
        }
        assert_eq!(ClassLabel::ALL.len(), 7);
        assert_eq!(ClassLabel::Mel.index(), 0);
        assert_eq!(ClassLabel::Nv.index(), 1);
        assert_eq!(ClassLabel::Bcc.index(), 2);
        assert_eq!(ClassLabel::Akiec.index(), 3);
        assert_eq!(ClassLabel::Bkl.index(), 4);
        assert_eq!(ClassLabel::Df.index(), 5);
        assert_eq!(ClassLabel::Vasc.index(), 6);
        assert!(ClassLabel::from_index(7).is_err());
        assert!(ClassLabel::from_code("XYZ").is_err());
    }

    #[test]
    fn manifest_roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(DatasetKind::Synthetic, 99, dir.path());
        let mut rec = ImageRecord::new("a_0", "images/a_0.png");
        rec.label = Some(ClassLabel::Df);
        rec.mask = Some(PathBuf::from("images/a_0_segmentation.png"));
        rec.hairy = Some(true);
        rec.stroke_mask = Some(PathBuf::from("strokes/a_0_stroke.png"));
        m.records.push(rec);
        let mut rec2 = ImageRecord::new("b_1", "images/b_1.png");
        rec2.label = Some(ClassLabel::Mel);
        rec2.stage = Stage::Resized;
        m.records.push(rec2);

        let path = dir.path().join("test.manifest");
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back.kind, m.kind);
        assert_eq!(back.seed, m.seed);
        assert_eq!(back.records, m.records);
        // Write the reread manifest again: byte-identical files.
        let path2 = dir.path().join("test2.manifest");
        back.write(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn manifest_rejects_count_mismatch_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(DatasetKind::Classification, 0, dir.path());
        let mut rec = ImageRecord::new("x", "x.png");
        rec.label = Some(ClassLabel::Nv);
        m.records.push(rec.clone());
        let path = dir.path().join("m.manifest");
        m.write(&path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("count\tNV\t1", "count\tNV\t2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            DatasetManifest::read(&path),
            Err(Error::Manifest(_))
        ));

        m.records.push(rec);
        let path2 = dir.path().join("dup.manifest");
        m.write(&path2).unwrap();
        assert!(matches!(
            DatasetManifest::read(&path2),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn ingest_classification_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["im_c", "im_a", "im_b"] {
            write_png(&dir.path().join(format!("{id}.png")), 4, 4);
        }
        let gt = dir.path().join("gt.csv");
        fs::write(
            &gt,
            "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\n\
             im_c,0.0,0.0,0.0,0.0,0.0,1.0,0.0\n\
             im_a,1.0,0.0,0.0,0.0,0.0,0.0,0.0\n\
             im_b,0.0,1.0,0.0,0.0,0.0,0.0,0.0\n",
        )
        .unwrap();
        let m = ingest_classification(dir.path(), &gt).unwrap();
        let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["im_a", "im_b", "im_c"]);
        let counts = m.class_counts();
        assert_eq!(counts[ClassLabel::Mel.index()], 1);
        assert_eq!(counts[ClassLabel::Nv.index()], 1);
        assert_eq!(counts[ClassLabel::Df.index()], 1);
        assert_eq!(counts.iter().sum::<usize>(), 3);
        assert_eq!(counts.iter().sum::<usize>(), m.len());
    }

    #[test]
    fn ingest_classification_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let gt = dir.path().join("gt.csv");
        fs::write(&gt, "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\n").unwrap();
        let m = ingest_classification(dir.path(), &gt).unwrap();
        assert_eq!(m.len(), 0);
        assert_eq!(m.class_counts(), [0; 7]);
    }

    #[test]
    fn ingest_classification_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("ok.png"), 4, 4);
        let gt = dir.path().join("gt.csv");

        // Missing image file.
        fs::write(
            &gt,
            "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nmissing,1,0,0,0,0,0,0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_classification(dir.path(), &gt),
            Err(Error::MissingImage { .. })
        ));

        // Two positive indicators.
        fs::write(
            &gt,
            "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nok,1,1,0,0,0,0,0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_classification(dir.path(), &gt),
            Err(Error::BadGroundTruthRow { positives: 2, .. })
        ));

        // Zero positive indicators.
        fs::write(
            &gt,
            "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nok,0,0,0,0,0,0,0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_classification(dir.path(), &gt),
            Err(Error::BadGroundTruthRow { positives: 0, .. })
        ));

        // Duplicate id.
        fs::write(
            &gt,
            "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nok,1,0,0,0,0,0,0\nok,1,0,0,0,0,0,0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_classification(dir.path(), &gt),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn ingest_classification_is_table_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["p", "q"] {
            write_png(&dir.path().join(format!("{id}.png")), 4, 4);
        }
        let gt1 = dir.path().join("gt1.csv");
        let gt2 = dir.path().join("gt2.csv");
        fs::write(
            &gt1,
            "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\np,1,0,0,0,0,0,0\nq,0,1,0,0,0,0,0\n",
        )
        .unwrap();
        fs::write(
            &gt2,
            "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nq,0,1,0,0,0,0,0\np,1,0,0,0,0,0,0\n",
        )
        .unwrap();
        let m1 = ingest_classification(dir.path(), &gt1).unwrap();
        let m2 = ingest_classification(dir.path(), &gt2).unwrap();
        assert_eq!(m1.records, m2.records);
    }

    #[test]
    fn ingest_segmentation_pairs_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("s1.png"), 4, 6);
        let mask = ndarray::Array2::from_elem((4, 6), false);
        raster::save_mask(&dir.path().join("s1_segmentation.png"), &mask).unwrap();
        let m = ingest_segmentation(dir.path(), DEFAULT_MASK_SUFFIX).unwrap();
        assert_eq!(m.len(), 1);
        let loaded = m.load_mask(&m.records[0]).unwrap().unwrap();
        assert!(loaded.iter().all(|&v| !v));

        // Image without mask.
        write_png(&dir.path().join("s2.png"), 4, 6);
        assert!(matches!(
            ingest_segmentation(dir.path(), DEFAULT_MASK_SUFFIX),
            Err(Error::MissingMask { .. })
        ));

        // Dimension mismatch.
        let bad = ndarray::Array2::from_elem((3, 3), true);
        raster::save_mask(&dir.path().join("s2_segmentation.png"), &bad).unwrap();
        assert!(matches!(
            ingest_segmentation(dir.path(), DEFAULT_MASK_SUFFIX),
            Err(Error::MaskDimMismatch { .. })
        ));
    }

    #[test]
    fn relative_path_lexical() {
        assert_eq!(
            relative_path(Path::new("/o/split"), Path::new("/o/synth/images/a.png")).unwrap(),
            PathBuf::from("../synth/images/a.png")
        );
        assert_eq!(
            relative_path(Path::new("/o"), Path::new("/o/a.png")).unwrap(),
            PathBuf::from("a.png")
        );
    }
}
