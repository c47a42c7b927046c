//! Optimisation loop, learning-rate schedule, evaluation and the ablation
//! sweep.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, canonical_json, CheckpointError};
use crate::config::{ConfigError, ModelConfig, Objective};
use crate::data::{BatchStream, CorruptionConfig, DataError, MaskedBatch, Vocab, CLS};
use crate::model::{mix_seed, Grads, Model, ModelError, Params, Task};
use crate::par;
use crate::sift::SiftConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_interval: usize,
    /// Window of the moving-average losses in the metrics log.
    pub log_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-6,
            grad_clip: 1.0,
            seed: 42,
            checkpoint_interval: 0,
            log_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |f: &str, m: &str| Err(ConfigError::new(format!("trainer.{f}"), m));
        if self.steps == 0 {
            return err("steps", "must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !(self.peak_lr > 0.0) {
            return err("peak_lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return err("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return err("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return err("grad_clip", "must be positive");
        }
        if self.log_window == 0 {
            return err("log_window", "must be positive");
        }
        Ok(())
    }

    /// Warm-up length actually used: capped at `steps`, so a short run cut
    /// from a longer configuration still has a well-formed schedule.
    pub fn effective_warmup(&self) -> usize {
        self.warmup_steps.min(self.steps)
    }

    /// Linear warm-up from 0 to `peak_lr`, then linear decay to 0 at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.effective_warmup();
        let s = step.min(self.steps) as f64;
        let w = warmup as f64;
        if step < warmup {
            self.peak_lr * s / w
        } else if self.steps == warmup {
            self.peak_lr
        } else {
            self.peak_lr * (self.steps as f64 - s) / (self.steps as f64 - w)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("loss diverged at step {step}; last good checkpoint kept")]
    Diverged { step: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .values_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    norm
}

/// Whether decoupled weight decay applies to a parameter.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with("gain"))
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params, grads: &Grads, lr: f64) -> Result<(), ModelError> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *pi);
            }
        }
        Ok(())
    }
}

/// One metrics-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub objective: Objective,
    pub loss: f64,
    /// Moving average of MLM losses over the last `log_window` MLM steps.
    pub mlm_loss: Option<f64>,
    /// Moving average of ARLM losses over the last `log_window` ARLM steps.
    pub arlm_loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub sift_reg: Option<f64>,
}

/// What to train on.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub corruption: CorruptionConfig,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    /// Hex SHA-256 chain over the digests of every batch consumed.
    pub batch_hash: String,
    pub final_mlm_loss: Option<f64>,
    pub final_ppl: Option<f64>,
}

struct Window {
    cap: usize,
    values: VecDeque<f64>,
    sum: f64,
}

impl Window {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            values: VecDeque::new(),
            sum: 0.0,
        }
    }

    fn push(&mut self, v: f64) {
        self.values.push_back(v);
        if self.values.len() > self.cap {
            self.values.pop_front();
        }
        // Re-summing keeps the average independent of history.
        self.sum = self.values.iter().sum();
    }

    fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.sum / self.values.len() as f64)
    }
}

/// Output locations for a training run.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

const QUEUE_DEPTH: usize = 4;

/// Trains `model` in place.
///
/// Batches come from a producer thread through a bounded queue; the
/// optimiser runs here. Every step appends one canonical-JSON line to the
/// metrics log when `out` is given. A non-finite loss stops the run, leaving
/// the parameters (and the checkpoint on disk) from the last good step.
pub fn train(
    model: &mut Model,
    vocab: &Vocab,
    data: &TrainData,
    cfg: &TrainConfig,
    sift: &SiftConfig,
    out: Option<&OutputPaths>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    sift.validate()?;
    model.config.validate()?;

    let mut stream = BatchStream::new(
        data.sequences.clone(),
        data.seq_len,
        cfg.batch_size,
        model.config.vocab_size,
        data.corruption,
        cfg.seed,
    )?;
    let (tx, rx) = mpsc::sync_channel::<Result<MaskedBatch, DataError>>(QUEUE_DEPTH);
    let steps = cfg.steps;
    let producer = std::thread::spawn(move || {
        for _ in 0..steps {
            if tx.send(stream.next_batch()).is_err() {
                break;
            }
        }
    });

    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(io_err(&o.dir))?;
            let p = o.metrics();
            Some(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
        }
        None => None,
    };

    let mut adam = Adam::new(cfg);
    let mut mlm = Window::new(cfg.log_window);
    let mut arlm = Window::new(cfg.log_window);
    let mut chain = [0u8; 32];
    let mut metrics = Vec::with_capacity(cfg.steps);
    let sift_cfg = sift.enabled.then_some(sift);
    let objective = model.config.objective;

    for step in 0..cfg.steps {
        let batch = rx.recv().expect("producer ended early")?;
        let mut h = Sha256::new();
        h.update(chain);
        h.update(batch.digest());
        chain = h.finalize().into();

        let obj = objective.at_step(step);
        let seed = mix_seed(cfg.seed ^ 0xD0_D0, step as u64);
        let res = model.batch_loss(&batch, obj, sift_cfg, Some(seed), true)?;
        if !res.loss.is_finite() {
            drop(rx);
            let _ = producer.join();
            if let Some(o) = out {
                checkpoint::save(&o.checkpoint(), model, vocab)?;
            }
            return Err(TrainError::Diverged { step: step + 1 });
        }
        let mut grads = res.grads.expect("gradients requested");
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        adam.step(&mut model.params, &grads, lr)?;

        match obj {
            Objective::Arlm => arlm.push(res.task_loss),
            _ => mlm.push(res.task_loss),
        }
        let perplexity = if objective.uses_arlm() {
            arlm.mean().map(f64::exp)
        } else {
            mlm.mean().map(f64::exp)
        };
        let m = StepMetrics {
            step: step + 1,
            objective: obj,
            loss: res.loss,
            mlm_loss: mlm.mean(),
            arlm_loss: arlm.mean(),
            perplexity,
            grad_norm,
            lr,
            sift_reg: sift_cfg.filter(|s| s.is_active()).map(|_| res.regularizer),
        };
        if let (Some(w), Some(o)) = (log.as_mut(), out) {
            let p = o.metrics();
            writeln!(w, "{}", canonical_json(&m)).map_err(io_err(&p))?;
            w.flush().map_err(io_err(&p))?;
        }
        metrics.push(m);
        if let Some(o) = out {
            if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
                checkpoint::save(&o.checkpoint(), model, vocab)?;
            }
        }
    }
    drop(rx);
    let _ = producer.join();
    if let Some(o) = out {
        checkpoint::save(&o.checkpoint(), model, vocab)?;
    }
    let last = metrics.last();
    Ok(TrainReport {
        batch_hash: hex::encode(chain),
        final_mlm_loss: last.and_then(|m| m.mlm_loss),
        final_ppl: last.and_then(|m| m.perplexity),
        metrics,
    })
}

/// Perplexity report for a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    /// `(sequence, position, nll)` for every predicted token.
    pub per_position: Vec<(usize, usize, f64)>,
}

/// Splits eval sequences so each fits the model once `[CLS]` is prepended.
pub fn eval_sequences(sequences: &[Vec<u32>], max_len: usize) -> Vec<Vec<u32>> {
    let window = max_len.saturating_sub(1).max(1);
    sequences
        .iter()
        .flat_map(|s| s.chunks(window))
        .map(|c| std::iter::once(CLS).chain(c.iter().copied()).collect())
        .collect()
}

/// `exp` of the mean causal next-token NLL over every token of every
/// sequence (each sequence is prefixed with `[CLS]`, which is never itself
/// predicted). No gradients are recorded.
pub fn evaluate_ppl(model: &Model, sequences: &[Vec<u32>]) -> Result<EvalReport, TrainError> {
    let seqs = eval_sequences(sequences, model.config.max_len);
    if seqs.is_empty() {
        return Err(DataError::EmptyCorpus.into());
    }
    let per_seq = par::map_range(seqs.len(), |i| {
        model.token_nll(&Task::Arlm { tokens: &seqs[i] })
    });
    let mut per_position = Vec::new();
    let mut sum = 0.0;
    for (i, r) in per_seq.into_iter().enumerate() {
        for (p, nll) in r?.into_iter().enumerate() {
            sum += nll;
            per_position.push((i, p + 1, nll));
        }
    }
    let tokens = per_position.len();
    let mean_nll = sum / tokens as f64;
    Ok(EvalReport {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens,
        per_position,
    })
}

/// The six ablation variants, in table order.
pub const ABLATION_VARIANTS: [&str; 6] =
    ["full", "-EMD", "-C2P", "-P2C", "-(EMD+C2P)", "-(EMD+P2C)"];

/// Applies a named ablation to a base configuration.
pub fn ablate(base: &ModelConfig, variant: &str) -> Option<ModelConfig> {
    let mut c = base.clone();
    match variant {
        "full" => {}
        "-EMD" => c.ablations.emd = false,
        "-C2P" => c.ablations.c2p = false,
        "-P2C" => c.ablations.p2c = false,
        "-(EMD+C2P)" => {
            c.ablations.emd = false;
            c.ablations.c2p = false;
        }
        "-(EMD+P2C)" => {
            c.ablations.emd = false;
            c.ablations.p2c = false;
        }
        _ => return None,
    }
    Some(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub final_mlm_loss: Option<f64>,
    pub final_ppl: Option<f64>,
    pub steps: usize,
    pub seed: u64,
    pub batch_hash: String,
}

/// Trains every variant from the same seed on the same batch stream. Each
/// variant's run artefacts go to `out/<variant>/` when `out` is given.
pub fn run_ablation_suite(
    base: &ModelConfig,
    vocab: &Vocab,
    data: &TrainData,
    cfg: &TrainConfig,
    sift: &SiftConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mc = ablate(base, variant).expect("known variant");
        let mut model = Model::new(mc, cfg.seed)?;
        let paths = out.map(|d| OutputPaths {
            dir: d.join(variant_dir(variant)),
        });
        let report = train(&mut model, vocab, data, cfg, sift, paths.as_ref())?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            final_mlm_loss: report.final_mlm_loss,
            final_ppl: report.final_ppl,
            steps: cfg.steps,
            seed: cfg.seed,
            batch_hash: report.batch_hash,
        });
    }
    Ok(rows)
}

/// Filesystem-safe directory name for a variant.
pub fn variant_dir(variant: &str) -> String {
    match variant {
        "full" => "full".into(),
        v => format!(
            "no_{}",
            v.trim_start_matches('-')
                .trim_matches(|c| c == '(' || c == ')')
                .replace('+', "_")
                .to_lowercase()
        ),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with header `variant,final_mlm_loss,final_ppl,steps,seed`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,final_mlm_loss,final_ppl,steps,seed\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant,
            fmt_opt(r.final_mlm_loss),
            fmt_opt(r.final_ppl),
            r.steps,
            r.seed
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            peak_lr: 2e-3,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(100), 2e-3);
        assert_eq!(c.lr_at(1000), 0.0);
        assert!((c.lr_at(50) - 1e-3).abs() < 1e-18);
        assert!((c.lr_at(550) - 1e-3).abs() < 1e-15);
        let short = TrainConfig { steps: 10, ..c };
        assert_eq!(short.lr_at(0), 0.0);
        assert_eq!(short.lr_at(10), 2e-3);
    }

    #[test]
    fn scalar_adam_matches_closed_form() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = Params::from_map([("w".to_string(), Tensor::vector(vec![0.5]))].into());
        let mut adam = Adam::new(&cfg);
        let g = 0.3;
        let grads: Grads = [("w".to_string(), vec![g])].into();
        adam.step(&mut p, &grads, 0.1).unwrap();
        let m = (1.0 - 0.9) * g / (1.0 - 0.9);
        let v = (1.0 - 0.999) * g * g / (1.0 - 0.999);
        let expect = 0.5 - 0.1 * m / (f64::sqrt(v) + 1e-6);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_biases_and_gains() {
        assert!(decays("encoder.0.attn.q"));
        assert!(!decays("encoder.0.attn.out_bias"));
        assert!(!decays("embed.norm.gain"));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g: Grads = [("a".to_string(), vec![3.0, 4.0])].into();
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let after = g["a"].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-12);
    }

    #[test]
    fn variant_dirs_are_distinct() {
        let dirs: std::collections::BTreeSet<_> =
            ABLATION_VARIANTS.iter().map(|v| variant_dir(v)).collect();
        assert_eq!(dirs.len(), 6);
        assert_eq!(variant_dir("-(EMD+C2P)"), "no_emd_c2p");
    }

    #[test]
    fn csv_header() {
        let csv = ablation_csv(&[]);
        assert_eq!(csv, "variant,final_mlm_loss,final_ppl,steps,seed\n");
    }
}
