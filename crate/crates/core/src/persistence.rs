//! Tensor container files: checkpoints, snapshots and resume state.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the raw little-endian payload. Every tensor in a file shares one dtype.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{LoraAdapterSet, TextEncoder, TokenKind};

pub const FORMAT_VERSION: u32 = 1;

const LORA_PREFIX: &str = "lora.";
const TOKEN_PREFIX: &str = "token.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: header declares {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("unsupported format version {0} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("tensor `{name}` range {offset}+{length} exceeds payload of {payload} bytes")]
    RangeOutOfBounds {
        name: String,
        offset: u64,
        length: u64,
        payload: u64,
    },
    #[error("tensors `{0}` and `{1}` overlap in the payload")]
    OverlappingRanges(String, String),
    #[error("architecture mismatch at `{layer}`: {detail}")]
    ArchitectureMismatch { layer: String, detail: String },
    #[error("container is a {found:?}, expected a {expected:?}")]
    WrongKind {
        expected: ContainerKind,
        found: ContainerKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Checkpoint,
    Snapshot,
    TrainState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: [usize; 2],
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub tensor: String,
    pub init_word: String,
    #[serde(flatten)]
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: ContainerKind,
    pub config_digest: String,
    pub payload_length: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub dtype: DType,
    pub config_digest: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: ParamStore,
    pub tokens: Vec<TokenEntry>,
}

impl Container {
    pub fn new(kind: ContainerKind, dtype: DType, config_digest: impl Into<String>) -> Self {
        Self {
            kind,
            dtype,
            config_digest: config_digest.into(),
            metadata: BTreeMap::new(),
            tensors: ParamStore::new(),
            tokens: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn expect_kind(&self, kind: ContainerKind) -> Result<()> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind,
                found: self.kind,
            }
            .into());
        }
        Ok(())
    }

    fn header(&self) -> Header {
        let size = self.dtype.size() as u64;
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = t.len() as u64 * size;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: self.dtype,
                    shape: [t.rows(), t.cols()],
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            config_digest: self.config_digest.clone(),
            payload_length: offset,
            metadata: self.metadata.clone(),
            tensors,
            tokens: self.tokens.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec_pretty(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for &v in t.data() {
                match self.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let header = read_header(bytes)?;
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload = &bytes[8 + hlen..];
        let dtype = header.tensors.first().map_or(DType::F32, |e| e.dtype);
        let mut tensors = ParamStore::new();
        for e in &header.tensors {
            if e.dtype != dtype {
                return Err(CheckpointError::CorruptHeader("mixed dtypes in one container".into()));
            }
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.insert(e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data));
        }
        for tok in &header.tokens {
            if !tensors.contains(&tok.tensor) {
                return Err(CheckpointError::CorruptHeader(format!(
                    "token `{}` refers to missing tensor `{}`",
                    tok.token, tok.tensor
                )));
            }
        }
        Ok(Self {
            kind: header.kind,
            dtype,
            config_digest: header.config_digest,
            metadata: header.metadata,
            tensors,
            tokens: header.tokens,
        })
    }
}

/// Parses and validates the header without decoding any tensor.
pub fn read_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::CorruptHeader(format!(
            "file of {} bytes has no header length",
            bytes.len()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let rest = (bytes.len() - 8) as u64;
    if hlen > rest {
        return Err(CheckpointError::CorruptHeader(format!(
            "header length {hlen} exceeds file size"
        )));
    }
    let text = std::str::from_utf8(&bytes[8..8 + hlen as usize])
        .map_err(|e| CheckpointError::CorruptHeader(format!("header is not UTF-8: {e}")))?;
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::CorruptHeader("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::UnsupportedVersion(version as u32));
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let payload = header.payload_length;
    for e in &header.tensors {
        let end = e.offset.checked_add(e.length);
        if end.is_none_or(|end| end > payload) {
            return Err(CheckpointError::RangeOutOfBounds {
                name: e.name.clone(),
                offset: e.offset,
                length: e.length,
                payload,
            });
        }
        let want = (e.shape[0] * e.shape[1] * e.dtype.size()) as u64;
        if e.length != want {
            return Err(CheckpointError::CorruptHeader(format!(
                "tensor `{}` of shape {:?} cannot occupy {} bytes",
                e.name, e.shape, e.length
            )));
        }
    }
    let mut sorted: Vec<&TensorEntry> = header.tensors.iter().filter(|e| e.length > 0).collect();
    sorted.sort_by_key(|e| e.offset);
    for w in sorted.windows(2) {
        if w[0].offset + w[0].length > w[1].offset {
            return Err(CheckpointError::OverlappingRanges(w[0].name.clone(), w[1].name.clone()));
        }
    }
    let mut names: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(CheckpointError::CorruptHeader(format!("duplicate tensor `{}`", w[0])));
    }
    if rest - hlen < payload {
        return Err(CheckpointError::TruncatedPayload {
            expected: payload,
            actual: rest - hlen,
        });
    }
    Ok(header)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save(container: &Container, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&container.to_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    Ok(Container::from_bytes(&bytes)?)
}

/// Packages adapters and learned token embeddings as an f32 checkpoint.
pub fn checkpoint_from(encoder: &TextEncoder, adapters: &LoraAdapterSet, config_digest: &str) -> Container {
    let mut c = Container::new(ContainerKind::Checkpoint, DType::F32, config_digest);
    c.metadata.insert("encoder_arch".into(), encoder.arch_digest());
    c.metadata.insert("lora.rank".into(), adapters.rank().to_string());
    c.metadata.insert("lora.scale".into(), format!("{:?}", adapters.scale()));
    for (name, t) in adapters.params().iter() {
        c.tensors.insert(format!("{LORA_PREFIX}{name}"), t.clone());
    }
    let table = encoder.learned_table();
    for (i, tok) in encoder.registry().tokens().iter().enumerate() {
        let tensor = format!("{TOKEN_PREFIX}{}", tok.literal);
        c.tensors
            .insert(tensor.clone(), Tensor::from_vec(1, table.cols(), table.row(i).to_vec()));
        c.tokens.push(TokenEntry {
            token: tok.literal.clone(),
            tensor,
            init_word: tok.init_word.clone(),
            kind: tok.kind.clone(),
        });
    }
    c
}

fn mismatch(layer: impl Into<String>, detail: impl Into<String>) -> Error {
    CheckpointError::ArchitectureMismatch {
        layer: layer.into(),
        detail: detail.into(),
    }
    .into()
}

/// Attaches a checkpoint to a base encoder: registers its tokens in order and
/// returns the encoder together with the adapter set.
pub fn apply_checkpoint(encoder: &TextEncoder, ckpt: &Container) -> Result<(TextEncoder, LoraAdapterSet)> {
    ckpt.expect_kind(ContainerKind::Checkpoint)?;
    if let Some(name) = ckpt
        .tensors
        .names()
        .find(|n| !n.starts_with(LORA_PREFIX) && !n.starts_with(TOKEN_PREFIX))
    {
        return Err(CheckpointError::CorruptHeader(format!("unexpected tensor `{name}` in checkpoint")).into());
    }
    let mut lora = ParamStore::new();
    for (name, t) in ckpt.tensors.iter() {
        let Some(local) = name.strip_prefix(LORA_PREFIX) else {
            continue;
        };
        let (path, factor) = local
            .rsplit_once('.')
            .ok_or_else(|| mismatch(local, "malformed adapter tensor name"))?;
        let w = encoder
            .params()
            .get(&format!("{path}.weight"))
            .ok_or_else(|| mismatch(path, "layer does not exist in this encoder"))?;
        let ok = match factor {
            "lora_a" => t.cols() == w.cols(),
            "lora_b" => t.rows() == w.rows(),
            _ => false,
        };
        if !ok {
            return Err(mismatch(
                path,
                format!("adapter {factor} of shape {:?} does not fit weight {:?}", t.shape(), w.shape()),
            ));
        }
        lora.insert(local, t.clone());
    }
    let rank: usize = ckpt
        .meta("lora.rank")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::CorruptHeader("missing lora.rank".into()))?;
    let scale: f64 = ckpt
        .meta("lora.scale")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::CorruptHeader("missing lora.scale".into()))?;
    let adapters = LoraAdapterSet::from_params(rank, scale, lora)?;
    if let Some(arch) = ckpt.meta("encoder_arch") {
        if arch != encoder.arch_digest() {
            return Err(mismatch(
                "encoder",
                "architecture digest differs from the checkpoint's base encoder",
            ));
        }
    }
    let mut out = encoder.clone();
    for tok in &ckpt.tokens {
        let row = ckpt.tensors.expect(&tok.tensor);
        if row.shape() != (1, encoder.config().width) {
            return Err(mismatch(
                "embed",
                format!("token `{}` has shape {:?}, encoder width is {}", tok.token, row.shape(), encoder.config().width),
            ));
        }
        out.register_token(tok.token.clone(), tok.init_word.clone(), tok.kind.clone(), row.data())?;
    }
    Ok((out, adapters))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(ContainerKind::Snapshot, DType::F64, "abc");
        c.tensors.insert("a", Tensor::from_vec(2, 2, vec![1.0, -2.5, 3.25, 0.1]));
        c.tensors.insert("b", Tensor::from_vec(1, 3, vec![4.0, 5.0, 6.0]));
        c
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn f32_payload_rounds_once() {
        let mut c = sample();
        c.dtype = DType::F32;
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.tensors.expect("a").get(0, 0), 1.0);
        assert_eq!(back.tensors.expect("a").get(1, 1), 0.1f32 as f64);
        assert_eq!(Container::from_bytes(&back.to_bytes()).unwrap(), back);
    }

    #[test]
    fn empty_directory_is_valid() {
        let c = Container::new(ContainerKind::Checkpoint, DType::F32, "");
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert!(back.tensors.is_empty());
        assert_eq!(read_header(&bytes).unwrap().payload_length, 0);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, CheckpointError::TruncatedPayload { .. }));
        assert!(matches!(
            Container::from_bytes(&bytes[..5]).unwrap_err(),
            CheckpointError::CorruptHeader(_)
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&sample(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
