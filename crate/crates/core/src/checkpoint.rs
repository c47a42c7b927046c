//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DAL1"                       magic + format version
//! u64  meta_len, meta bytes    canonical JSON {"config": …, "vocab": […]}
//! repeated until EOF:
//!   u32 name_len, name bytes
//!   u32 rank, rank × u64 extents
//!   f64 × product(extents)
//! ```
//!
//! Tensors are written in name order, so equal models give equal bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocab;
use crate::model::{Model, ModelError, Params};
use crate::tensor::Tensor;

const MAGIC: &[u8; 3] = b"DAL";
const VERSION: u8 = b'1';

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    Format,
    #[error("unsupported checkpoint version {0:?}")]
    Version(char),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("malformed checkpoint metadata: {0}")]
    Metadata(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in checkpoint")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
}

/// Serialises model and vocabulary into the byte format above.
pub fn to_bytes(model: &Model, vocab: &Vocab) -> Vec<u8> {
    let meta = Meta {
        config: model.config.clone(),
        vocab: vocab.corpus_tokens().to_vec(),
    };
    let meta = canonical_json(&meta);
    let mut out = Vec::with_capacity(8 + meta.len() + model.params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Canonical JSON text: keys sorted, compact, shortest round-trip floats.
pub fn canonical_json<T: Serialize>(v: &T) -> String {
    // serde_json's Value map is ordered by key, which makes this canonical.
    let value = serde_json::to_value(v).expect("serialisable");
    serde_json::to_string(&value).expect("serialisable")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses a checkpoint and rebuilds the model, checking every tensor against
/// the stored configuration.
pub fn from_bytes(buf: &[u8]) -> Result<(Model, Vocab), CheckpointError> {
    if buf.len() < 4 || &buf[..3] != MAGIC {
        return Err(CheckpointError::Format);
    }
    if buf[3] != VERSION {
        return Err(CheckpointError::Version(buf[3] as char));
    }
    let mut r = Reader { buf, pos: 4 };
    let meta_len = r.u64("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: Meta =
        serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let vocab = Vocab::from_file_str(
        &meta
            .vocab
            .iter()
            .map(|t| format!("{t}\n"))
            .collect::<String>(),
    )
    .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    if vocab.len() != meta.config.vocab_size {
        return Err(CheckpointError::Metadata(format!(
            "vocabulary has {} entries but model.vocab_size is {}",
            vocab.len(),
            meta.config.vocab_size
        )));
    }
    meta.config.validate().map_err(ModelError::from)?;
    let expected: BTreeMap<String, Vec<usize>> = meta.config.param_shapes().into_iter().collect();

    let mut tensors = BTreeMap::new();
    while !r.done() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::Metadata("tensor name is not UTF-8".into()))?;
        let rank = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let Some(want) = expected.get(&name) else {
            return Err(CheckpointError::UnexpectedTensor(name));
        };
        if *want != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: want.clone(),
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(ModelError::from)?;
        tensors.insert(name, t);
    }
    if let Some(missing) = expected.keys().find(|k| !tensors.contains_key(*k)) {
        return Err(CheckpointError::MissingTensor(missing.clone()));
    }
    let model = Model::from_params(meta.config, Params::from_map(tensors))?;
    Ok((model, vocab))
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save(path: &Path, model: &Model, vocab: &Vocab) -> Result<(), CheckpointError> {
    write_atomic(path, &to_bytes(model, vocab))
}

pub fn load(path: &Path) -> Result<(Model, Vocab), CheckpointError> {
    let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;

    fn fixture() -> (Model, Vocab) {
        let vocab = build_vocab("a b c d e f", 100).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 2,
            ffn_size: 8,
            max_relative_distance: 2,
            vocab_size: vocab.len(),
            max_len: 8,
            ..ModelConfig::default()
        };
        (Model::new(cfg, 5).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, v) = fixture();
        let bytes = to_bytes(&m, &v);
        let (m2, v2) = from_bytes(&bytes).unwrap();
        assert_eq!(m.params, m2.params);
        assert_eq!(m.config, m2.config);
        assert_eq!(v, v2);
        assert_eq!(bytes, to_bytes(&m2, &v2));
    }

    #[test]
    fn errors_are_distinct() {
        let (m, v) = fixture();
        let bytes = to_bytes(&m, &v);
        assert!(matches!(from_bytes(b"NOPE"), Err(CheckpointError::Format)));
        let mut v2 = bytes.clone();
        v2[3] = b'2';
        assert!(matches!(
            from_bytes(&v2),
            Err(CheckpointError::Version('2'))
        ));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let (m, v) = fixture();
        let mut cfg = m.config.clone();
        cfg.ffn_size = 6;
        let other = Model::new(cfg.clone(), 5).unwrap();
        // Metadata of `m`, tensors of `other`.
        let a = to_bytes(&m, &v);
        let b = to_bytes(&other, &v);
        let meta_end =
            |buf: &[u8]| 12 + u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        let mut mixed = a[..meta_end(&a)].to_vec();
        mixed.extend_from_slice(&b[meta_end(&b)..]);
        match from_bytes(&mixed) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => assert!(name.contains("ffn")),
            other => panic!("{other:?}"),
        }
    }
}
