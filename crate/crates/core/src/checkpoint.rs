//! Versioned model checkpoints.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header
//! (model kind, architecture, training metadata, tensor directory), then
//! raw little-endian f64 tensor data in directory order. Writing the same
//! model twice yields byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ClsModel, EncoderSpec, HairNet, SegModel};
use crate::nn::{export_tensors, import_tensors};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DPCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Seg,
    Cls,
    Hair,
}

/// Everything needed to rebuild the model before loading tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub encoder_spec: Option<EncoderSpec>,
    pub n_classes: Option<usize>,
    pub hair_input_side: Option<usize>,
    pub seed: u64,
    pub trained_epochs: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn write_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    tensors: &BTreeMap<String, ArrayD<f64>>,
) -> Result<()> {
    let mut header = header.clone();
    header.tensors = tensors
        .iter()
        .map(|(name, data)| TensorEntry {
            name: name.clone(),
            shape: data.shape().to_vec(),
        })
        .collect();
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for entry in &header.tensors {
        let data = &tensors[&entry.name];
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, ArrayD<f64>>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut offset = header_end;
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let end = offset + 8 * count;
        if bytes.len() < end {
            return Err(Error::Checkpoint(format!(
                "truncated tensor data for '{}'",
                entry.name
            )));
        }
        let values: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.insert(entry.name.clone(), array);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((header, tensors))
}

pub fn save_seg<F: Scalar>(
    path: &Path,
    model: &mut SegModel<F>,
    seed: u64,
    trained_epochs: u32,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: ModelKind::Seg,
        encoder_spec: Some(model.encoder.spec.clone()),
        n_classes: None,
        hair_input_side: None,
        seed,
        trained_epochs,
        tensors: Vec::new(),
    };
    write_checkpoint(path, &header, &export_tensors(model))
}

pub fn save_cls<F: Scalar>(
    path: &Path,
    model: &mut ClsModel<F>,
    seed: u64,
    trained_epochs: u32,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: ModelKind::Cls,
        encoder_spec: Some(model.encoder.spec.clone()),
        n_classes: Some(model.n_classes()),
        hair_input_side: None,
        seed,
        trained_epochs,
        tensors: Vec::new(),
    };
    write_checkpoint(path, &header, &export_tensors(model))
}

pub fn save_hair<F: Scalar>(path: &Path, model: &mut HairNet<F>, seed: u64) -> Result<()> {
    let header = CheckpointHeader {
        kind: ModelKind::Hair,
        encoder_spec: None,
        n_classes: None,
        hair_input_side: Some(model.input_side()),
        seed,
        trained_epochs: model.trained_epochs(),
        tensors: Vec::new(),
    };
    write_checkpoint(path, &header, &export_tensors(model))
}

fn expect_kind(header: &CheckpointHeader, want: ModelKind, path: &Path) -> Result<()> {
    if header.kind != want {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} model, expected {:?}",
            path.display(),
            header.kind,
            want
        )));
    }
    Ok(())
}

pub fn load_seg<F: Scalar>(path: &Path) -> Result<(SegModel<F>, CheckpointHeader)> {
    let (header, tensors) = read_checkpoint(path)?;
    expect_kind(&header, ModelKind::Seg, path)?;
    let spec = header
        .encoder_spec
        .clone()
        .ok_or_else(|| Error::Checkpoint("segmentation checkpoint lacks encoder spec".into()))?;
    let mut model = SegModel::build(&spec, header.seed)?;
    import_tensors(&mut model, &tensors)?;
    Ok((model, header))
}

pub fn load_cls<F: Scalar>(path: &Path) -> Result<(ClsModel<F>, CheckpointHeader)> {
    let (header, tensors) = read_checkpoint(path)?;
    expect_kind(&header, ModelKind::Cls, path)?;
    let spec = header
        .encoder_spec
        .clone()
        .ok_or_else(|| Error::Checkpoint("classifier checkpoint lacks encoder spec".into()))?;
    let n_classes = header
        .n_classes
        .ok_or_else(|| Error::Checkpoint("classifier checkpoint lacks class count".into()))?;
    let mut model = ClsModel::build(&spec, n_classes, header.seed)?;
    import_tensors(&mut model, &tensors)?;
    Ok((model, header))
}

pub fn load_hair<F: Scalar>(path: &Path) -> Result<(HairNet<F>, CheckpointHeader)> {
    let (header, tensors) = read_checkpoint(path)?;
    expect_kind(&header, ModelKind::Hair, path)?;
    let side = header
        .hair_input_side
        .ok_or_else(|| Error::Checkpoint("stroke checkpoint lacks input side".into()))?;
    let mut model = HairNet::build(side, header.seed)?;
    import_tensors(&mut model, &tensors)?;
    model.mark_trained(header.trained_epochs);
    Ok((model, header))
}

/// Header only, for `inspect-model`.
pub fn inspect(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_checkpoint(path)?.0)
}

/// Tensor directory (name, element count) for `inspect-model`.
pub fn tensor_directory(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let (header, _) = read_checkpoint(path)?;
    Ok(header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderSpec;

    #[test]
    fn seg_roundtrip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::desk();
        let mut model = SegModel::<f32>::build(&spec, 42).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_seg(&p1, &mut model, 42, 0).unwrap();
        let (mut loaded, header) = load_seg::<f32>(&p1).unwrap();
        assert_eq!(header.trained_epochs, 0);
        assert_eq!(
            export_tensors(&mut loaded),
            export_tensors(&mut model),
            "tensors survive the roundtrip exactly"
        );
        save_seg(&p2, &mut loaded, 42, 0).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "re-saved checkpoint is byte-identical"
        );
    }

    #[test]
    fn kind_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = HairNet::<f32>::build(32, 1).unwrap();
        let p = dir.path().join("hair.ckpt");
        save_hair(&p, &mut model, 1).unwrap();
        assert!(matches!(load_cls::<f32>(&p), Err(Error::Checkpoint(_))));
        let (mut back, _) = load_hair::<f32>(&p).unwrap();
        assert_eq!(export_tensors(&mut back), export_tensors(&mut model));
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(matches!(inspect(&p), Err(Error::Checkpoint(_))));
    }
}
