//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"DMCKPT\0\0"
//! version      u32       FORMAT_VERSION
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (see `Header`)
//! tensors      f32 values of every parameter, in header tensor order
//! checksum     32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{CachedAdapter, EncoderKind, Vocab};
use crate::error::{Error, Result};
use crate::scorer::{ModelKind, ScorerConfig, ScorerModel, FORMAT_VERSION};

pub const MAGIC: &[u8; 8] = b"DMCKPT\0\0";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the tensor section, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub id: String,
    pub dim: usize,
    pub pooling: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub config: ScorerConfig,
    pub encoder_dim: usize,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorRecord>,
    pub adapter: Option<AdapterRecord>,
}

fn encode(m: &ScorerModel) -> Result<Vec<u8>> {
    let header = Header {
        kind: m.kind(),
        config: m.config.clone(),
        encoder_dim: m.config.encoder.out_dim,
        vocab: m.vocab.tokens().to_vec(),
        tensors: m
            .params
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset: e.slot.offset,
            })
            .collect(),
        adapter: m.adapter().map(|a| AdapterRecord {
            id: a.id().to_string(),
            dim: a.dim(),
            pooling: a.pooling().to_string(),
        }),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + 4 * m.params.len() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in m.params.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes the checkpoint atomically (temp file, then rename).
pub fn save_checkpoint(m: &ScorerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(m)?;
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("truncated archive: needed {n} bytes at offset {}", *at)))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Parses and verifies the archive, returning the header and f32 tensor data.
pub fn read_archive(bytes: &[u8]) -> Result<(Header, Vec<f32>)> {
    let mut at = 0;
    if take(bytes, &mut at, MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version mismatch: file has {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
    let header_bytes = take(bytes, &mut at, usize::try_from(header_len).unwrap_or(usize::MAX))?;
    if bytes.len() < at + CHECKSUM_LEN {
        return Err(Error::Checkpoint("truncated archive: missing checksum".into()));
    }
    let body_end = bytes.len() - CHECKSUM_LEN;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(Error::Checkpoint(
            "checksum mismatch: archive is corrupt or truncated".into(),
        ));
    }
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let data = &bytes[at..body_end];
    if !data.len().is_multiple_of(4) {
        return Err(Error::Checkpoint(
            "tensor section is not a whole number of f32 values".into(),
        ));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

fn build(header: Header, values: Vec<f32>, adapter: Option<Arc<CachedAdapter>>) -> Result<ScorerModel> {
    if header.config.kind != header.kind {
        return Err(Error::Checkpoint("header kind disagrees with config snapshot".into()));
    }
    let adapter = if header.config.encoder.kind == EncoderKind::ExternalAdapter {
        let rec = header
            .adapter
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("external-encoder checkpoint lacks adapter metadata".into()))?;
        let a = adapter.ok_or_else(|| {
            Error::AdapterNotConfigured(format!("checkpoint needs adapter `{}` (dim {})", rec.id, rec.dim))
        })?;
        if a.id() != rec.id || a.dim() != rec.dim {
            return Err(Error::Checkpoint(format!(
                "adapter mismatch: checkpoint has `{}` (dim {}), got `{}` (dim {})",
                rec.id,
                rec.dim,
                a.id(),
                a.dim()
            )));
        }
        Some(a)
    } else {
        None
    };
    let mut model = ScorerModel::new(header.config, Vocab::from_list(header.vocab), adapter)?;
    let entries = model.params.entries();
    let layout_ok = entries.len() == header.tensors.len()
        && entries
            .iter()
            .zip(&header.tensors)
            .all(|(e, t)| e.name == t.name && e.shape == t.shape && e.slot.offset == t.offset);
    if !layout_ok || values.len() != model.params.len() {
        return Err(Error::Checkpoint(
            "tensor table does not match the architecture described by the config".into(),
        ));
    }
    for (dst, src) in model.params.data_mut().iter_mut().zip(&values) {
        *dst = f64::from(*src);
    }
    Ok(model)
}

/// Loads a checkpoint. External-encoder checkpoints need their adapter.
pub fn load_checkpoint(path: impl AsRef<Path>, adapter: Option<Arc<CachedAdapter>>) -> Result<ScorerModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, values) = read_archive(&bytes)?;
    build(header, values, adapter)
}

/// Loads a checkpoint, failing unless it holds a model of kind `expected`.
pub fn load_checkpoint_as(
    path: impl AsRef<Path>,
    expected: ModelKind,
    adapter: Option<Arc<CachedAdapter>>,
) -> Result<ScorerModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, values) = read_archive(&bytes)?;
    if header.kind != expected {
        return Err(Error::KindMismatch {
            expected: expected.name().to_string(),
            found: header.kind.name().to_string(),
        });
    }
    build(header, values, adapter)
}

/// Reads only the header (no adapter needed).
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_archive(&bytes)?.0)
}

/// Hex SHA-256 of the checkpoint file, used to tag reports.
pub fn checkpoint_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Utterance};
    use crate::encoder::{EncoderSpec, HashAdapter};

    fn vocab() -> Vocab {
        Vocab::from_tokens(["a", "b", "c", "d"].map(String::from))
    }

    fn small(kind: ModelKind) -> ScorerModel {
        let cfg = ScorerConfig {
            kind,
            encoder: EncoderSpec {
                embed_dim: 6,
                out_dim: 8,
                ..Default::default()
            },
            model_dim: 4,
            transition_hidden: 3,
            classifier_hidden: 5,
            seed: 3,
            ..Default::default()
        };
        ScorerModel::new(cfg, vocab(), None).unwrap()
    }

    fn u(s: &str) -> Utterance {
        Utterance::new(Speaker::A, s.split_whitespace().map(String::from).collect())
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = small(ModelKind::DialogueAware);
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p, None).unwrap();
        assert_eq!(back.params, m.params);
        let ctx = [u("a b"), u("c")];
        assert_eq!(
            m.score(&ctx, &u("d a")).unwrap().value().to_bits(),
            back.score(&ctx, &u("d a")).unwrap().value().to_bits()
        );
        assert_eq!(checkpoint_hash(&p).unwrap().len(), 64);
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&small(ModelKind::FlatRecurrent), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        for cut in [0, 5, 13, 30, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&p, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&p, None), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 0x10;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::Checkpoint(_))));
        let mut versioned = bytes;
        versioned[8] = 99;
        fs::write(&p, &versioned).unwrap();
        match load_checkpoint(&p, None) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn kind_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.ckpt");
        save_checkpoint(&small(ModelKind::FlatRecurrent), &p).unwrap();
        assert!(matches!(
            load_checkpoint_as(&p, ModelKind::DialogueAware, None),
            Err(Error::KindMismatch { .. })
        ));
        assert!(load_checkpoint_as(&p, ModelKind::FlatRecurrent, None).is_ok());
    }

    #[test]
    fn external_checkpoint_requires_adapter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ext.ckpt");
        let adapter = Arc::new(CachedAdapter::new(Arc::new(HashAdapter::new(12))));
        let cfg = ScorerConfig {
            kind: ModelKind::FlatExternal,
            encoder: EncoderSpec {
                kind: EncoderKind::ExternalAdapter,
                embed_dim: 12,
                out_dim: 12,
                seed: 0,
            },
            model_dim: 4,
            classifier_hidden: 5,
            ..Default::default()
        };
        let m = ScorerModel::new(cfg, vocab(), Some(adapter.clone())).unwrap();
        save_checkpoint(&m, &p).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::AdapterNotConfigured(_))));
        let back = load_checkpoint(&p, Some(adapter)).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(read_header(&p).unwrap().adapter.unwrap().dim, 12);
    }
}
