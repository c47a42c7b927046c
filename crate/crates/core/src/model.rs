//! The network: embeddings, disentangled-attention encoder, enhanced mask
//! decoder and tied language-model head.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    disentangled_attention, AttentionInput, AttentionMask, AttentionSettings, AttentionVars,
    ScoreTerms,
};
use crate::config::{ConfigError, ModelConfig, Objective};
use crate::data::MaskedBatch;
use crate::nn::{self, Dropout};
use crate::par;
use crate::relpos::{DeltaCache, RelPosError};
use crate::sift::{self, SiftConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    RelPos(#[from] RelPosError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab {
        id: u32,
        position: usize,
        vocab: usize,
    },
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("{0}")]
    Contract(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

/// Gradients keyed like [`Params`].
pub type Grads = BTreeMap<String, Vec<f64>>;

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl Params {
    /// Normal(0, std) truncated at 2σ for matrices, 1 for norm gains, 0 for
    /// biases. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 2 {
                (0..n)
                    .map(|_| truncated_normal(&mut rng, config.init_std))
                    .collect()
            } else if name.ends_with("gain") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            let t = Tensor::new(shape, data).expect("shape");
            tensors.insert(name, Arc::new(t));
        }
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    fn arc(&self, name: &str) -> Result<Arc<Tensor>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// Mutable access; copies the storage if a tape still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = Arc::new(t);
                Ok(())
            }
            Some(slot) => Err(TensorError::DimensionMismatch {
                op: "Params::set",
                left: slot.shape().to_vec(),
                right: t.shape().to_vec(),
            }
            .into()),
            None => Err(ModelError::UnknownParam(name.to_string())),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name).map(|t| Arc::unwrap_or_clone(t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Binds parameters onto one tape lazily; each name becomes exactly one leaf,
/// so shared uses accumulate into one gradient.
pub struct Binder<'p> {
    params: &'p Params,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p Params, trainable: bool) -> Self {
        Self {
            params,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.arc(name)?;
        let v = if self.trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Grads {
        let mut out = Grads::new();
        for (name, &v) in &self.bound {
            if let Some(g) = tape.grad(v) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// A single (unpadded) row handed to the model.
#[derive(Debug, Clone, Copy)]
pub enum Task<'a> {
    /// Predict `original[p]` for each `p` in `masked` from `tokens`.
    Mlm {
        tokens: &'a [u32],
        original: &'a [u32],
        masked: &'a [usize],
    },
    /// Predict token `t+1` from positions `0..=t` under a causal mask.
    Arlm { tokens: &'a [u32] },
}

impl<'a> Task<'a> {
    pub fn tokens(&self) -> &'a [u32] {
        match self {
            Task::Mlm { tokens, .. } | Task::Arlm { tokens } => tokens,
        }
    }

    /// Query positions whose logits are needed, and their targets.
    pub fn targets(&self) -> (Vec<usize>, Vec<u32>) {
        match self {
            Task::Mlm {
                original, masked, ..
            } => (
                masked.to_vec(),
                masked.iter().map(|&p| original[p]).collect(),
            ),
            Task::Arlm { tokens } => {
                let n = tokens.len().saturating_sub(1);
                ((0..n).collect(), tokens[1..].to_vec())
            }
        }
    }

    pub fn is_causal(&self) -> bool {
        matches!(self, Task::Arlm { .. })
    }
}

/// Options for one sequence forward.
pub struct ForwardOptions<'a> {
    pub dropout: Dropout,
    /// Added to the normalised word embeddings (before the affine part of the
    /// embedding norm).
    pub perturbation: Option<Var>,
    /// Collect per-layer, per-head encoder attention probabilities.
    pub record_attention: bool,
    /// Override of the absolute-position table (testing hook).
    pub abs_pos_override: Option<&'a Tensor>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            dropout: Dropout::disabled(),
            perturbation: None,
            record_attention: false,
            abs_pos_override: None,
        }
    }
}

pub struct SequenceForward {
    /// Logits for the target rows, `rows.len() × vocab`.
    pub logits: Var,
    pub rows: Vec<usize>,
    pub targets: Vec<u32>,
    /// Normalised word embeddings (pre-affine), `n × d`.
    pub normalized: Var,
    /// Encoder hidden states, `n × d`.
    pub hidden: Var,
    /// `attention[layer][head]`, each `n × n`.
    pub attention: Vec<Vec<Var>>,
}

/// Per-batch loss summary. Losses are means over predicted positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub task_loss: f64,
    pub regularizer: f64,
    pub count: usize,
    pub grads: Option<Grads>,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    deltas: DeltaCache,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            deltas: DeltaCache::new(),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self {
            config,
            params,
            deltas: DeltaCache::new(),
        })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(TensorError::DimensionMismatch {
                        op: "Model::from_params",
                        left: shape.clone(),
                        right: t.shape().to_vec(),
                    }
                    .into())
                }
                None => return Err(ModelError::UnknownParam(name.clone())),
            }
        }
        if params.len() != shapes.len() {
            let extra = params
                .names()
                .find(|n| !shapes.iter().any(|(s, _)| s == n))
                .unwrap_or_default()
                .to_string();
            return Err(ModelError::UnknownParam(extra));
        }
        Ok(Self {
            config,
            params,
            deltas: DeltaCache::new(),
        })
    }

    fn settings(&self) -> AttentionSettings {
        AttentionSettings {
            heads: self.config.heads,
            terms: ScoreTerms {
                c2p: self.config.ablations.c2p,
                p2c: self.config.ablations.p2c,
            },
            kernel: self.config.kernel,
            attention_dropout: self.config.attention_dropout,
        }
    }

    fn attention_vars(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        prefix: &str,
    ) -> Result<AttentionVars> {
        let cfg = &self.config;
        let w_qc = b.var(tape, &format!("{prefix}.attn.q"))?;
        let w_kc = b.var(tape, &format!("{prefix}.attn.k"))?;
        let w_vc = b.var(tape, &format!("{prefix}.attn.v"))?;
        let w_qr = match (cfg.ablations.p2c, cfg.share_projection) {
            (false, _) => None,
            (true, true) => Some(w_qc),
            (true, false) => Some(b.var(tape, &format!("{prefix}.attn.q_rel"))?),
        };
        let w_kr = match (cfg.ablations.c2p, cfg.share_projection) {
            (false, _) => None,
            (true, true) => Some(w_kc),
            (true, false) => Some(b.var(tape, &format!("{prefix}.attn.k_rel"))?),
        };
        Ok(AttentionVars {
            w_qc,
            w_kc,
            w_vc,
            w_qr,
            w_kr,
            w_o: b.var(tape, &format!("{prefix}.attn.out"))?,
            b_o: b.var(tape, &format!("{prefix}.attn.out_bias"))?,
        })
    }

    /// Attention → add & norm → feed-forward → add & norm (post-norm).
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        prefix: &str,
        query: Var,
        kv: Var,
        input: (
            Option<Var>,
            Arc<crate::tensor::IndexMatrix>,
            Option<Arc<[usize]>>,
        ),
        mask: &AttentionMask,
        dropout: &mut Dropout,
        probs: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let eps = self.config.layer_norm_eps;
        let vars = self.attention_vars(tape, b, prefix)?;
        let (rel, delta, query_pos) = input;
        let att_in = AttentionInput {
            query,
            kv,
            rel,
            delta,
            query_pos,
        };
        let a =
            disentangled_attention(tape, &att_in, &vars, &self.settings(), mask, dropout, probs)?;
        let a = dropout.apply(tape, a)?;
        let r = tape.add(query, a)?;
        let g = b.var(tape, &format!("{prefix}.attn_norm.gain"))?;
        let bb = b.var(tape, &format!("{prefix}.attn_norm.bias"))?;
        let x = tape.layer_norm(r, g, bb, eps)?;

        let w1 = b.var(tape, &format!("{prefix}.ffn.in"))?;
        let b1 = b.var(tape, &format!("{prefix}.ffn.in_bias"))?;
        let w2 = b.var(tape, &format!("{prefix}.ffn.out"))?;
        let b2 = b.var(tape, &format!("{prefix}.ffn.out_bias"))?;
        let h = nn::linear(tape, x, w1, Some(b1))?;
        let h = tape.gelu(h);
        let f = nn::linear(tape, h, w2, Some(b2))?;
        let f = dropout.apply(tape, f)?;
        let r = tape.add(x, f)?;
        let g = b.var(tape, &format!("{prefix}.ffn_norm.gain"))?;
        let bb = b.var(tape, &format!("{prefix}.ffn_norm.bias"))?;
        Ok(tape.layer_norm(r, g, bb, eps)?)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::Contract("empty sequence"));
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        for (position, &id) in tokens.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    id,
                    position,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Word embeddings → normalisation (+ optional perturbation) → affine →
    /// dropout. Returns `(embedded, normalised)`.
    fn embed(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        tokens: &[u32],
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Var)> {
        let n = tokens.len();
        let d = self.config.hidden;
        let word = b.var(tape, "embed.word")?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut e = tape.gather_rows(word, ids)?;
        if self.config.abs_pos_at_input {
            let table = self.abs_pos_var(tape, b, opts)?;
            let p = tape.gather_rows(table, (0..n).collect::<Vec<_>>())?;
            e = tape.add(e, p)?;
        }
        let ones = tape.constant(Tensor::full(&[d], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[d]));
        let normalized = tape.layer_norm(e, ones, zeros, self.config.layer_norm_eps)?;
        let mut x = normalized;
        if let Some(delta) = opts.perturbation {
            x = tape.add(x, delta)?;
        }
        let g = b.var(tape, "embed.norm.gain")?;
        let bb = b.var(tape, "embed.norm.bias")?;
        x = tape.mul_row(x, g)?;
        x = tape.add_row(x, bb)?;
        x = opts.dropout.apply(tape, x)?;
        Ok((x, normalized))
    }

    fn abs_pos_var(&self, tape: &mut Tape, b: &mut Binder, opts: &ForwardOptions) -> Result<Var> {
        match opts.abs_pos_override {
            Some(t) => Ok(tape.constant(t.clone())),
            None => b.var(tape, "embed.abs_pos"),
        }
    }

    /// Encoder only: `n × d` hidden states plus the intermediate handles.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        tokens: &[u32],
        causal: bool,
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Var, Vec<Vec<Var>>)> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let (mut x, normalized) = self.embed(tape, b, tokens, opts)?;
        let delta = self.deltas.get(n, self.config.max_relative_distance)?;
        let rel = if self.config.uses_rel_table() {
            Some(b.var(tape, "rel.table")?)
        } else {
            None
        };
        let mask = if causal {
            AttentionMask::causal()
        } else {
            AttentionMask::none()
        };
        let mut attention = Vec::new();
        for l in 0..self.config.layers {
            let mut probs = Vec::new();
            let rec = opts.record_attention.then_some(&mut probs);
            x = self.block(
                tape,
                b,
                &format!("encoder.{l}"),
                x,
                x,
                (rel, Arc::clone(&delta), None),
                &mask,
                &mut opts.dropout,
                rec,
            )?;
            if opts.record_attention {
                attention.push(probs);
            }
        }
        Ok((x, normalized, attention))
    }

    /// Full forward for one row: encoder, decoder head and LM logits for the
    /// task's target rows.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        task: &Task,
        opts: &mut ForwardOptions,
    ) -> Result<SequenceForward> {
        let tokens = task.tokens();
        let causal = task.is_causal();
        let (hidden, normalized, attention) = self.encode_on(tape, b, tokens, causal, opts)?;
        let (rows, targets) = task.targets();
        if rows.is_empty() {
            return Err(ModelError::Contract("no prediction targets"));
        }
        let decoded = self.decode_on(tape, b, hidden, tokens.len(), &rows, causal, opts)?;
        let logits = self.lm_head(tape, b, decoded)?;
        Ok(SequenceForward {
            logits,
            rows,
            targets,
            normalized,
            hidden,
            attention,
        })
    }

    /// Decoder states for `rows`.
    ///
    /// With the enhanced mask decoder, the first layer's query input is the
    /// encoder state plus the absolute position embedding; every later layer
    /// takes the previous layer's output as query while keys and values stay
    /// the encoder states. Without it, one ordinary block runs over all
    /// positions and the target rows are selected afterwards.
    #[allow(clippy::too_many_arguments)]
    fn decode_on(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        hidden: Var,
        n: usize,
        rows: &[usize],
        causal: bool,
        opts: &mut ForwardOptions,
    ) -> Result<Var> {
        let delta = self.deltas.get(n, self.config.max_relative_distance)?;
        let rel = if self.config.uses_rel_table() {
            Some(b.var(tape, "rel.table")?)
        } else {
            None
        };
        let mask = if causal {
            AttentionMask::causal()
        } else {
            AttentionMask::none()
        };
        if !self.config.ablations.emd {
            let d = self.block(
                tape,
                b,
                "decoder.0",
                hidden,
                hidden,
                (rel, delta, None),
                &mask,
                &mut opts.dropout,
                None,
            )?;
            return Ok(tape.gather_rows(d, rows.to_vec())?);
        }
        let qpos: Arc<[usize]> = Arc::from(rows.to_vec());
        let h_rows = tape.gather_rows(hidden, rows.to_vec())?;
        let abs = self.abs_pos_var(tape, b, opts)?;
        let p_rows = tape.gather_rows(abs, rows.to_vec())?;
        let mut i = tape.add(h_rows, p_rows)?;
        for m in 0..self.config.emd_layers {
            let prefix = if self.config.emd_shared {
                "decoder.0".to_string()
            } else {
                format!("decoder.{m}")
            };
            i = self.block(
                tape,
                b,
                &prefix,
                i,
                hidden,
                (rel, Arc::clone(&delta), Some(Arc::clone(&qpos))),
                &mask,
                &mut opts.dropout,
                None,
            )?;
        }
        Ok(i)
    }

    /// Dense → GELU → norm → tied output embedding + bias.
    fn lm_head(&self, tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
        let w = b.var(tape, "lm_head.dense")?;
        let bias = b.var(tape, "lm_head.dense_bias")?;
        let h = nn::linear(tape, x, w, Some(bias))?;
        let h = tape.gelu(h);
        let g = b.var(tape, "lm_head.norm.gain")?;
        let nb = b.var(tape, "lm_head.norm.bias")?;
        let h = tape.layer_norm(h, g, nb, self.config.layer_norm_eps)?;
        let word = b.var(tape, "embed.word")?;
        let logits = tape.matmul_nt(h, word)?;
        let ob = b.var(tape, "lm_head.bias")?;
        Ok(tape.add_row(logits, ob)?)
    }

    /// Encoder states for one unpadded sequence (no dropout).
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let (h, _, _) = self.encode_on(
            &mut tape,
            &mut b,
            tokens,
            false,
            &mut ForwardOptions::default(),
        )?;
        Ok(tape.value(h).clone())
    }

    /// Logits for the task's target rows (no dropout, no gradients).
    pub fn logits(&self, task: &Task) -> Result<Tensor> {
        self.logits_with(task, ForwardOptions::default())
    }

    pub fn logits_with(&self, task: &Task, mut opts: ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let f = self.forward_on(&mut tape, &mut b, task, &mut opts)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Post-softmax encoder attention, `[layer][head]`, each `n × n`.
    pub fn attention_maps(&self, tokens: &[u32]) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let mut opts = ForwardOptions {
            record_attention: true,
            ..ForwardOptions::default()
        };
        let (_, _, att) = self.encode_on(&mut tape, &mut b, tokens, false, &mut opts)?;
        Ok(att
            .into_iter()
            .map(|layer| layer.into_iter().map(|v| tape.value(v).clone()).collect())
            .collect())
    }

    /// Mean masked-token cross-entropy over the batch.
    pub fn forward_mlm(&self, batch: &MaskedBatch) -> Result<f64> {
        if batch.total_masked() == 0 {
            return Err(ModelError::Contract("batch has no masked positions"));
        }
        Ok(self
            .batch_loss(batch, Objective::Mlm, None, None, false)?
            .task_loss)
    }

    /// Mean next-token cross-entropy over positions `1..n`.
    pub fn forward_arlm(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(ModelError::Contract("ARLM needs at least two tokens"));
        }
        let (sum, count) = self.nll_sum(&Task::Arlm { tokens })?;
        Ok(sum / count as f64)
    }

    /// Summed next-token/masked-token NLL and the number of targets.
    pub fn nll_sum(&self, task: &Task) -> Result<(f64, usize)> {
        let nll = self.token_nll(task)?;
        Ok((nll.iter().sum(), nll.len()))
    }

    /// Per-target negative log-likelihood.
    pub fn token_nll(&self, task: &Task) -> Result<Vec<f64>> {
        let logits = self.logits(task)?;
        let (_, targets) = task.targets();
        Ok(nll_from_logits(&logits, &targets))
    }

    /// Loss (and optionally gradients) for one batch under `objective`.
    ///
    /// Rows run independently (in parallel when enabled); their sums are
    /// reduced in row order, then divided by the total target count.
    pub fn batch_loss(
        &self,
        batch: &MaskedBatch,
        objective: Objective,
        sift_cfg: Option<&SiftConfig>,
        dropout_seed: Option<u64>,
        want_grads: bool,
    ) -> Result<BatchLoss> {
        let objective = match objective {
            Objective::Joint => Objective::Mlm,
            o => o,
        };
        let per_row = par::map_range(batch.len(), |r| -> Result<Option<sift::RowLoss>> {
            let n = batch.valid_len(r);
            let task = match objective {
                Objective::Arlm => {
                    if n < 2 {
                        return Ok(None);
                    }
                    Task::Arlm {
                        tokens: &batch.x[r][..n],
                    }
                }
                _ => {
                    if batch.masked[r].is_empty() {
                        return Ok(None);
                    }
                    Task::Mlm {
                        tokens: &batch.x_tilde[r][..n],
                        original: &batch.x[r][..n],
                        masked: &batch.masked[r],
                    }
                }
            };
            let seed = dropout_seed.map(|s| mix_seed(s, r as u64));
            sift::row_loss(self, &task, sift_cfg, seed, want_grads).map(Some)
        });
        let mut total = 0.0;
        let mut task_total = 0.0;
        let mut reg_total = 0.0;
        let mut count = 0usize;
        let mut grads: Option<Grads> = want_grads.then(Grads::new);
        for row in per_row {
            let Some(row) = row? else { continue };
            total += row.total;
            task_total += row.nll;
            reg_total += row.regularizer;
            count += row.count;
            if let (Some(acc), Some(g)) = (grads.as_mut(), row.grads) {
                for (name, gv) in g {
                    match acc.get_mut(&name) {
                        Some(a) => a.iter_mut().zip(&gv).for_each(|(x, y)| *x += y),
                        None => {
                            acc.insert(name, gv);
                        }
                    }
                }
            }
        }
        if count == 0 {
            return Err(ModelError::Contract("batch has no prediction targets"));
        }
        let inv = 1.0 / count as f64;
        if let Some(g) = grads.as_mut() {
            for v in g.values_mut() {
                v.iter_mut().for_each(|x| *x *= inv);
            }
        }
        Ok(BatchLoss {
            loss: total * inv,
            task_loss: task_total * inv,
            regularizer: reg_total * inv,
            count,
            grads,
        })
    }
}

/// `-log softmax(logits)[r, target_r]` computed row by row.
pub fn nll_from_logits(logits: &Tensor, targets: &[u32]) -> Vec<f64> {
    let v = logits.last_dim();
    logits
        .data()
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[t as usize]
        })
        .collect()
}

/// Summed cross-entropy of `logits` rows against `targets`, on the tape.
pub fn nll_sum_on(tape: &mut Tape, logits: Var, targets: &[u32]) -> Result<Var> {
    let lp = tape.log_softmax_rows(logits);
    let at = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| (r, t as usize))
        .collect();
    let picked = tape.pick(lp, at)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// SplitMix-style mixing of a base seed with a stream index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
