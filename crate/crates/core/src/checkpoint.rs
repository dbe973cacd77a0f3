//! `UMRM` checkpoint container.
//!
//! ```text
//! magic        4 bytes   "UMRM"
//! version      u32 LE
//! header_len   u64 LE
//! header       JSON: layout, tensor directory, optional merge provenance
//! payload      f64 LE, row-major, tensors contiguous in directory order
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::merge::MergeProvenance;
use crate::model::{ModelLayout, RewardModel};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"UMRM";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"UMRM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt tensor directory: {0}")]
    CorruptDirectory(String),
    #[error("truncated payload: need {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model_kind: String,
    pub layout: ModelLayout,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_provenance: Option<MergeProvenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RewardModel,
    pub merge_provenance: Option<MergeProvenance>,
}

fn model_kind(model: &RewardModel) -> String {
    let arch = if model.is_moe() { "moe" } else { "dense" };
    let head = match model.head_kind() {
        crate::model::HeadKind::Reward => "reward",
        crate::model::HeadKind::Lm => "lm",
    };
    format!("{arch}-{head}")
}

pub fn to_bytes(model: &RewardModel, provenance: Option<&MergeProvenance>) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    for (name, t) in model.params().iter() {
        let length = (t.numel() * 8) as u64;
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = Header {
        model_kind: model_kind(model),
        layout: model.layout(),
        tensors,
        merge_provenance: provenance.cloned(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in model.params().values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut m = [0u8; 4];
        let n = bytes.len().min(4);
        m[..n].copy_from_slice(&bytes[..n]);
        return Err(CheckpointError::BadMagic(m));
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::CorruptDirectory("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| CheckpointError::CorruptDirectory("header extends past end of file".into()))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CheckpointError::CorruptDirectory(format!("header JSON: {e}")))?;
    Ok((header, header_end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (header, payload_start) = read_header(bytes)?;
    let payload = &bytes[payload_start..];

    let mut expected_offset = 0u64;
    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(CheckpointError::CorruptDirectory(format!("{}: dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.shape.is_empty() || numel == 0 || e.length != (numel * 8) as u64 {
            return Err(CheckpointError::CorruptDirectory(format!(
                "{}: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        if e.offset != expected_offset {
            return Err(CheckpointError::CorruptDirectory(format!(
                "{}: offset {} overlaps or leaves a gap (expected {expected_offset})",
                e.name, e.offset
            )));
        }
        expected_offset += e.length;
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(CheckpointError::CorruptDirectory(format!("duplicate tensor {}", e.name)));
        }
    }
    let found = payload.len() as u64;
    if found < expected_offset {
        return Err(CheckpointError::TruncatedPayload {
            expected: expected_offset,
            found,
        });
    }
    if found > expected_offset {
        return Err(CheckpointError::CorruptDirectory(format!(
            "{} trailing bytes after payload",
            found - expected_offset
        )));
    }

    let mut used = 0usize;
    let model = RewardModel::build(&header.layout, |name, shape| {
        let e = by_name
            .get(name)
            .ok_or_else(|| crate::Error::InvalidConfig(format!("missing tensor {name}")))?;
        used += 1;
        let start = e.offset as usize;
        let data = payload[start..start + e.length as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if t.shape() != shape {
            return Err(crate::Error::shape("checkpoint", format!("{name}: {:?}", t.shape())));
        }
        Ok(t)
    })
    .map_err(|e| CheckpointError::CorruptDirectory(e.to_string()))?;
    if used != header.tensors.len() {
        return Err(CheckpointError::CorruptDirectory(format!(
            "{} tensors in directory, layout uses {used}",
            header.tensors.len()
        )));
    }
    Ok(Checkpoint {
        model,
        merge_provenance: header.merge_provenance,
    })
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub fn save_checkpoint(
    model: &RewardModel,
    provenance: Option<&MergeProvenance>,
    path: &Path,
) -> Result<(), CheckpointError> {
    write_atomic(path, &to_bytes(model, provenance))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a model's serialized form (without provenance).
pub fn model_hash(model: &RewardModel) -> String {
    sha256_hex(&to_bytes(model, None))
}
