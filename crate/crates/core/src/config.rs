//! Model hyper-parameters and the parameter layout derived from them.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid configuration `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Masked language modelling.
    Mlm,
    /// Auto-regressive language modelling through a causal mask.
    Arlm,
    /// Alternates MLM (even steps) and ARLM (odd steps).
    Joint,
}

impl Objective {
    /// The objective used at optimizer step `step` (0-based).
    pub fn at_step(self, step: usize) -> Objective {
        match self {
            Objective::Joint if step % 2 == 0 => Objective::Mlm,
            Objective::Joint => Objective::Arlm,
            o => o,
        }
    }

    pub fn uses_arlm(self) -> bool {
        !matches!(self, Objective::Mlm)
    }
}

/// Which attention-score implementation the model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Project the `2k` relative embeddings once and gather scores by index.
    #[default]
    Efficient,
    /// Materialise a relative embedding per (query, key) pair.
    Naive,
}

/// Component switches; `true` means the component is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub emd: bool,
    pub c2p: bool,
    pub p2c: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            emd: true,
            c2p: true,
            p2c: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_size: usize,
    /// Maximum relative distance `k`; the position table has `2k` rows.
    pub max_relative_distance: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub emd_layers: usize,
    pub emd_shared: bool,
    pub objective: Objective,
    pub ablations: Ablations,
    /// Reuse the content query/key projections for relative positions.
    pub share_projection: bool,
    /// Add absolute position embeddings at the input layer as well.
    pub abs_pos_at_input: bool,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub kernel: Kernel,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_size: 256,
            max_relative_distance: 16,
            vocab_size: 1000,
            max_len: 128,
            emd_layers: 2,
            emd_shared: true,
            objective: Objective::Mlm,
            ablations: Ablations::default(),
            share_projection: false,
            abs_pos_at_input: false,
            dropout: 0.1,
            attention_dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            kernel: Kernel::Efficient,
        }
    }
}

/// Number of reserved special tokens at the start of every vocabulary.
pub const RESERVED_TOKENS: usize = 5;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |f: &str, m: &str| Err(ConfigError::new(format!("model.{f}"), m));
        if self.hidden < 2 {
            return err("hidden", "must be at least 2");
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return err("heads", "must be positive and divide hidden");
        }
        if self.ffn_size == 0 {
            return err("ffn_size", "must be positive");
        }
        if self.max_relative_distance == 0 {
            return err("max_relative_distance", "must be at least 1");
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return err("vocab_size", "must exceed the 5 reserved tokens");
        }
        if self.max_len == 0 {
            return err("max_len", "must be positive");
        }
        if self.emd_layers == 0 {
            return err("emd_layers", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return err("attention_dropout", "must lie in [0, 1)");
        }
        if !(self.layer_norm_eps >= 0.0) {
            return err("layer_norm_eps", "must be non-negative");
        }
        if !(self.init_std > 0.0) {
            return err("init_std", "must be positive");
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn uses_rel_table(&self) -> bool {
        self.ablations.c2p || self.ablations.p2c
    }

    pub fn uses_abs_pos(&self) -> bool {
        self.ablations.emd || self.abs_pos_at_input
    }

    /// Number of distinct decoder weight sets.
    pub fn decoder_blocks(&self) -> usize {
        if self.ablations.emd && !self.emd_shared {
            self.emd_layers
        } else {
            1
        }
    }

    /// Decoder passes actually run (1 when the enhanced decoder is ablated).
    pub fn decoder_passes(&self) -> usize {
        if self.ablations.emd {
            self.emd_layers
        } else {
            1
        }
    }

    fn block_shapes(&self, prefix: &str, out: &mut Vec<(String, Vec<usize>)>) {
        let d = self.hidden;
        let f = self.ffn_size;
        let mut push =
            |name: &str, shape: Vec<usize>| out.push((format!("{prefix}.{name}"), shape));
        push("attn.q", vec![d, d]);
        push("attn.k", vec![d, d]);
        push("attn.v", vec![d, d]);
        if !self.share_projection {
            if self.ablations.p2c {
                push("attn.q_rel", vec![d, d]);
            }
            if self.ablations.c2p {
                push("attn.k_rel", vec![d, d]);
            }
        }
        push("attn.out", vec![d, d]);
        push("attn.out_bias", vec![d]);
        push("attn_norm.gain", vec![d]);
        push("attn_norm.bias", vec![d]);
        push("ffn.in", vec![d, f]);
        push("ffn.in_bias", vec![f]);
        push("ffn.out", vec![f, d]);
        push("ffn.out_bias", vec![d]);
        push("ffn_norm.gain", vec![d]);
        push("ffn_norm.bias", vec![d]);
    }

    /// Every parameter tensor the model owns, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let v = self.vocab_size;
        let mut out = vec![
            ("embed.word".to_string(), vec![v, d]),
            ("embed.norm.gain".to_string(), vec![d]),
            ("embed.norm.bias".to_string(), vec![d]),
            ("lm_head.dense".to_string(), vec![d, d]),
            ("lm_head.dense_bias".to_string(), vec![d]),
            ("lm_head.norm.gain".to_string(), vec![d]),
            ("lm_head.norm.bias".to_string(), vec![d]),
            ("lm_head.bias".to_string(), vec![v]),
        ];
        if self.uses_abs_pos() {
            out.push(("embed.abs_pos".to_string(), vec![self.max_len, d]));
        }
        if self.uses_rel_table() {
            out.push((
                "rel.table".to_string(),
                vec![2 * self.max_relative_distance, d],
            ));
        }
        for l in 0..self.layers {
            self.block_shapes(&format!("encoder.{l}"), &mut out);
        }
        for m in 0..self.decoder_blocks() {
            self.block_shapes(&format!("decoder.{m}"), &mut out);
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn total_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Decode-side cost of the enhanced mask decoder relative to the encoder
    /// when 15% of tokens are reconstructed.
    pub fn emd_relative_cost(&self) -> f64 {
        if self.layers == 0 {
            return f64::INFINITY;
        }
        0.15 * self.decoder_passes() as f64 / self.layers as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_names_field() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "model.heads");
    }

    #[test]
    fn shared_decoder_has_one_block() {
        let shared = ModelConfig::default();
        let unshared = ModelConfig {
            emd_shared: false,
            ..ModelConfig::default()
        };
        let one = ModelConfig {
            emd_layers: 1,
            ..ModelConfig::default()
        };
        assert_eq!(shared.total_params(), one.total_params());
        assert!(unshared.total_params() > shared.total_params());
    }

    #[test]
    fn projection_sharing_removes_rel_matrices() {
        let base = ModelConfig::default();
        let shared = ModelConfig {
            share_projection: true,
            ..base.clone()
        };
        let d = base.hidden;
        let blocks = base.layers + base.decoder_blocks();
        assert_eq!(
            base.total_params() - shared.total_params(),
            2 * blocks * d * d
        );
    }

    #[test]
    fn joint_alternates() {
        assert_eq!(Objective::Joint.at_step(0), Objective::Mlm);
        assert_eq!(Objective::Joint.at_step(1), Objective::Arlm);
        assert_eq!(Objective::Arlm.at_step(0), Objective::Arlm);
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: Result<ModelConfig, _> = serde_json::from_str(r#"{"layerz": 3}"#);
        assert!(r.is_err());
        let r: ModelConfig = serde_json::from_str(r#"{"ablations": {"c2p": false}}"#).unwrap();
        assert!(!r.ablations.c2p && r.ablations.p2c);
    }
}
