//! Run configuration files: canonical JSON with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::canonical_json;
use crate::config::{ConfigError, ModelConfig};
use crate::data::{build_vocab, documents_to_sequences, CorruptionConfig, Vocab};
use crate::sift::SiftConfig;
use crate::trainer::{TrainConfig, TrainData};

/// The corpus shipped with the library (synthetic, public domain).
pub const BUNDLED_CORPUS: &str = include_str!("../assets/corpus.txt");
/// Corpus value selecting [`BUNDLED_CORPUS`].
pub const BUNDLED: &str = "@bundled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Path to a UTF-8 text file (one document per line) or `@bundled`.
    pub corpus: Option<String>,
    /// Held-out text for perplexity; defaults to the training corpus.
    pub eval_corpus: Option<String>,
    /// Vocabulary size cap, including the reserved tokens.
    pub vocab_cap: usize,
    /// Padded row length, including `[CLS]` and `[SEP]`.
    pub seq_len: usize,
    pub corruption: CorruptionConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: Some(BUNDLED.to_string()),
            eval_corpus: None,
            vocab_cap: 2000,
            seq_len: 32,
            corruption: CorruptionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub sift: SiftConfig,
    pub data: DataConfig,
}

fn parse_error(field: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::new(field, e.to_string())
}

/// Reads `key=value`; the value is parsed as JSON when possible and taken as
/// a bare string otherwise (`model.kernel=naive` works unquoted).
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::new(s, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::new(key, "malformed dotted key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `root.a.b.c = value`, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(ConfigError::new(
                    key,
                    format!("`{}` is not an object", parts[..i].join(".")),
                ));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

/// First unknown key, as a dotted path, by comparing against a defaulted
/// serialisation (serde's own message lacks the section name).
fn unknown_key(value: &Value, known: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(v), Value::Object(k)) = (value, known) else {
        return None;
    };
    for (key, sub) in v {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            None if !k.is_empty() => return Some(path),
            Some(ks) => {
                if let Some(p) = unknown_key(sub, ks, &path) {
                    return Some(p);
                }
            }
            None => {}
        }
    }
    None
}

impl RunConfig {
    /// Parses config text, then applies overrides in order (last wins).
    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| parse_error("config", e))?
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut value, &k, v)?;
        }
        let known = serde_json::to_value(RunConfig::default()).expect("serialisable");
        if let Some(k) = unknown_key(&value, &known, "") {
            return Err(ConfigError::new(k, "unknown key"));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| parse_error("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError::new("--config", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_str_with(&text, overrides)
    }

    /// Checks everything except `model.vocab_size`, which is derived from the
    /// corpus.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(crate::config::RESERVED_TOKENS + 1);
        m.validate()?;
        self.trainer.validate()?;
        self.sift.validate()?;
        let err = |f: &str, msg: &str| Err(ConfigError::new(format!("data.{f}"), msg));
        if self.data.seq_len < 3 {
            return err("seq_len", "must be at least 3");
        }
        if self.data.seq_len > self.model.max_len {
            return err("seq_len", "must not exceed model.max_len");
        }
        if self.data.vocab_cap <= crate::config::RESERVED_TOKENS {
            return err("vocab_cap", "must exceed the 5 reserved tokens");
        }
        let c = &self.data.corruption;
        if !(c.mask_rate > 0.0) {
            return err("corruption.mask_rate", "must be positive");
        }
        if c.span_max == 0 {
            return err("corruption.span_max", "must be at least 1");
        }
        if !(c.mask_prob >= 0.0 && c.random_prob >= 0.0 && c.mask_prob + c.random_prob <= 1.0) {
            return err(
                "corruption",
                "mask_prob and random_prob must be non-negative and sum to at most 1",
            );
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(self)
    }
}

/// Reads a corpus reference (`@bundled` or a path).
pub fn read_corpus(
    field: &str,
    reference: Option<&str>,
    base: Option<&Path>,
) -> Result<String, ConfigError> {
    let Some(r) = reference else {
        return Err(ConfigError::new(field, "missing"));
    };
    if r == BUNDLED {
        return Ok(BUNDLED_CORPUS.to_string());
    }
    let mut path = PathBuf::from(r);
    if path.is_relative() {
        if let Some(b) = base {
            let candidate = b.join(&path);
            if candidate.exists() {
                path = candidate;
            }
        }
    }
    std::fs::read_to_string(&path)
        .map_err(|e| ConfigError::new(field, format!("cannot read {r}: {e}")))
}

/// Vocabulary, model configuration and data derived from a run config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub train: TrainData,
    pub eval: Vec<Vec<u32>>,
}

/// Loads the corpus, builds the vocabulary and sequences. `base` is used to
/// resolve relative corpus paths that do not exist relative to the working
/// directory.
pub fn prepare(cfg: &RunConfig, base: Option<&Path>) -> Result<Prepared, ConfigError> {
    let text = read_corpus("data.corpus", cfg.data.corpus.as_deref(), base)?;
    let vocab = build_vocab(&text, cfg.data.vocab_cap)
        .map_err(|e| ConfigError::new("data.corpus", e.to_string()))?;
    let sequences = documents_to_sequences(&text, &vocab, cfg.data.seq_len - 2);
    let eval_text = match cfg.data.eval_corpus.as_deref() {
        Some(r) => read_corpus("data.eval_corpus", Some(r), base)?,
        None => text,
    };
    let eval = documents_to_sequences(&eval_text, &vocab, cfg.model.max_len);
    let mut model = cfg.model.clone();
    model.vocab_size = vocab.len();
    model.validate()?;
    Ok(Prepared {
        vocab,
        model,
        train: TrainData {
            sequences,
            seq_len: cfg.data.seq_len,
            corruption: cfg.data.corruption,
        },
        eval,
    })
}
