//! Scale-invariant adversarial regularisation on normalised word embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::model::{nll_sum_on, Binder, ForwardOptions, Grads, Model, ModelError, Result, Task};
use crate::nn::Dropout;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiftConfig {
    pub enabled: bool,
    /// Per-token L2 bound on the perturbation.
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub lambda: f64,
    /// Standard deviation of the random starting perturbation.
    pub init_std: f64,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 1e-2,
            ascent_steps: 1,
            ascent_lr: 1e-3,
            lambda: 1.0,
            init_std: 1e-5,
        }
    }
}

impl SiftConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let err = |f: &str, m: &str| Err(ConfigError::new(format!("sift.{f}"), m));
        if !(self.epsilon > 0.0) {
            return err("epsilon", "must be positive");
        }
        if self.ascent_steps == 0 {
            return err("ascent_steps", "must be at least 1");
        }
        if !(self.ascent_lr > 0.0) {
            return err("ascent_lr", "must be positive");
        }
        if !(self.lambda >= 0.0) {
            return err("lambda", "must be non-negative");
        }
        if !(self.init_std >= 0.0) {
            return err("init_std", "must be non-negative");
        }
        Ok(())
    }

    /// Whether the regulariser changes anything at all.
    pub fn is_active(&self) -> bool {
        self.enabled && self.lambda > 0.0
    }
}

/// Standardise each row to zero mean and unit variance (`eps` guards the
/// constant-row case, which maps to zero).
pub fn normalize_embeddings(e: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, d) = e.dims2("normalize_embeddings")?;
    if d < 2 {
        return Err(ModelError::Contract(
            "normalisation needs at least two columns",
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(e.clone());
    let g = tape.constant(Tensor::full(&[d], 1.0));
    let b = tape.constant(Tensor::zeros(&[d]));
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// Symmetric KL, `Σ_rows Σ_v (p − q)(log p − log q)`, between the row-wise
/// softmax distributions of two logit matrices.
pub fn symmetric_kl(a: &Tensor, b: &Tensor) -> f64 {
    let v = a.last_dim();
    a.data()
        .chunks(v)
        .zip(b.data().chunks(v))
        .map(|(ra, rb)| {
            let la = log_softmax(ra);
            let lb = log_softmax(rb);
            la.iter()
                .zip(&lb)
                .map(|(x, y)| (x.exp() - y.exp()) * (x - y))
                .sum::<f64>()
        })
        .sum()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn symmetric_kl_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let la = tape.log_softmax_rows(a);
    let lb = tape.log_softmax_rows(b);
    let pa = tape.softmax_rows(a)?;
    let pb = tape.softmax_rows(b)?;
    let dp = tape.sub(pa, pb)?;
    let dl = tape.sub(la, lb)?;
    let prod = tape.mul(dp, dl)?;
    Ok(tape.sum(prod))
}

/// Loss contributions of one row: sums over its targets, not means.
#[derive(Debug, Clone)]
pub struct RowLoss {
    pub total: f64,
    pub nll: f64,
    pub regularizer: f64,
    pub count: usize,
    pub grads: Option<Grads>,
}

fn dropout_for(model: &Model, seed: Option<u64>) -> Dropout {
    match seed {
        Some(s) if model.config.dropout > 0.0 || model.config.attention_dropout > 0.0 => {
            Dropout::new(model.config.dropout, ChaCha8Rng::seed_from_u64(s))
        }
        _ => Dropout::disabled(),
    }
}

fn opts(model: &Model, seed: Option<u64>, perturbation: Option<Var>) -> ForwardOptions<'static> {
    ForwardOptions {
        dropout: dropout_for(model, seed),
        perturbation,
        ..ForwardOptions::default()
    }
}

/// Clips each row of `delta` to L2 norm at most `epsilon`.
pub fn project_rows(delta: &mut Tensor, epsilon: f64) {
    let d = delta.last_dim();
    for row in delta.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > epsilon {
            let s = epsilon / norm;
            row.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Perturbed-pass logits for a fixed `delta` (`n × d`), with parameters as
/// constants. Returns `(clean, perturbed)` logits.
fn perturbed_logits(
    model: &Model,
    task: &Task,
    delta: &Tensor,
    seed: Option<u64>,
) -> Result<(Tensor, Tensor)> {
    let clean = model.logits_with(task, opts(model, seed, None))?;
    let mut tape = Tape::new();
    let mut b = Binder::new(&model.params, false);
    let dv = tape.constant(delta.clone());
    let mut o = opts(model, seed, Some(dv));
    let f = model.forward_on(&mut tape, &mut b, task, &mut o)?;
    Ok((clean, tape.value(f.logits).clone()))
}

/// Symmetric KL between clean and perturbed output distributions for a given
/// perturbation.
pub fn divergence_at(model: &Model, task: &Task, delta: &Tensor, seed: Option<u64>) -> Result<f64> {
    let (clean, pert) = perturbed_logits(model, task, delta, seed)?;
    Ok(symmetric_kl(&clean, &pert))
}

/// Random start followed by `ascent_steps` normalised gradient-ascent steps
/// on the divergence, projecting onto the ε-ball after each step. Runs on a
/// throwaway tape; parameters are constants.
pub fn adversarial_delta(
    model: &Model,
    task: &Task,
    cfg: &SiftConfig,
    dropout_seed: Option<u64>,
    noise_seed: u64,
) -> Result<Tensor> {
    let n = task.tokens().len();
    let d = model.config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let init: Vec<f64> = (0..n * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * cfg.init_std)
        .collect();
    let mut delta = Tensor::new(vec![n, d], init)?;
    project_rows(&mut delta, cfg.epsilon);
    let clean = model.logits_with(task, opts(model, dropout_seed, None))?;
    for _ in 0..cfg.ascent_steps {
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params, false);
        let dv = tape.param(delta.clone());
        let mut o = opts(model, dropout_seed, Some(dv));
        let f = model.forward_on(&mut tape, &mut b, task, &mut o)?;
        let c = tape.constant(clean.clone());
        let r = symmetric_kl_on(&mut tape, c, f.logits)?;
        tape.backward(r)?;
        let g = tape
            .grad(dv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n * d]);
        for (drow, grow) in delta.data_mut().chunks_mut(d).zip(g.chunks(d)) {
            let norm = grow.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                let s = cfg.ascent_lr / norm;
                drow.iter_mut().zip(grow).for_each(|(x, gi)| *x += s * gi);
            }
        }
        project_rows(&mut delta, cfg.epsilon);
    }
    Ok(delta)
}

/// The adversarial regulariser value for one row (sum over its targets).
pub fn regularizer(
    model: &Model,
    task: &Task,
    cfg: &SiftConfig,
    dropout_seed: Option<u64>,
    noise_seed: u64,
) -> Result<f64> {
    let delta = adversarial_delta(model, task, cfg, dropout_seed, noise_seed)?;
    divergence_at(model, task, &delta, dropout_seed)
}

/// Task NLL for one row, plus `lambda · R` when the regulariser is active.
///
/// With the regulariser off (or `lambda == 0`) this is exactly the plain
/// clean-pass loss: no extra passes run, so no extra rounding can creep in.
pub fn row_loss(
    model: &Model,
    task: &Task,
    cfg: Option<&SiftConfig>,
    dropout_seed: Option<u64>,
    want_grads: bool,
) -> Result<RowLoss> {
    let mut tape = Tape::new();
    let mut b = Binder::new(&model.params, want_grads);
    let mut o = opts(model, dropout_seed, None);
    let f = model.forward_on(&mut tape, &mut b, task, &mut o)?;
    let nll = nll_sum_on(&mut tape, f.logits, &f.targets)?;
    let nll_value = tape.value(nll).data()[0];
    let count = f.targets.len();

    let active = cfg.filter(|c| c.is_active());
    let (loss, reg_value) = match active {
        None => (nll, 0.0),
        Some(c) => {
            let noise_seed = dropout_seed.unwrap_or(0) ^ 0x5EED_5EED;
            let delta = adversarial_delta(model, task, c, dropout_seed, noise_seed)?;
            let dv = tape.constant(delta);
            let mut po = opts(model, dropout_seed, Some(dv));
            let pf = model.forward_on(&mut tape, &mut b, task, &mut po)?;
            let r = symmetric_kl_on(&mut tape, f.logits, pf.logits)?;
            let reg = tape.value(r).data()[0];
            let wr = tape.scale(r, c.lambda);
            (tape.add(nll, wr)?, reg)
        }
    };
    let total = tape.value(loss).data()[0];
    if !total.is_finite() {
        return Ok(RowLoss {
            total,
            nll: nll_value,
            regularizer: reg_value,
            count,
            grads: None,
        });
    }
    let grads = if want_grads {
        tape.backward(loss)?;
        Some(b.grads(&tape))
    } else {
        None
    };
    Ok(RowLoss {
        total,
        nll: nll_value,
        regularizer: reg_value,
        count,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_size: 16,
            max_relative_distance: 4,
            vocab_size: 11,
            max_len: 16,
            dropout: 0.0,
            attention_dropout: 0.0,
            ..ModelConfig::default()
        };
        Model::new(cfg, 9).unwrap()
    }

    #[test]
    fn projection_bounds_rows() {
        let mut t = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.001, 0.0]).unwrap();
        project_rows(&mut t, 1.0);
        assert!((t.at(0, 0) - 0.6).abs() < 1e-15 && (t.at(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(t.at(1, 0), 0.001);
    }

    #[test]
    fn symmetric_kl_zero_on_equal() {
        let a = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(symmetric_kl(&a, &a), 0.0);
        let b = Tensor::new(vec![1, 3], vec![0.3, 0.2, 0.1]).unwrap();
        assert!(symmetric_kl(&a, &b) > 0.0);
    }

    #[test]
    fn lambda_zero_matches_plain() {
        let m = tiny();
        let tokens = [2u32, 6, 7, 8, 3];
        let task = Task::Mlm {
            tokens: &tokens,
            original: &tokens,
            masked: &[1, 3],
        };
        let plain = row_loss(&m, &task, None, Some(4), true).unwrap();
        let cfg = SiftConfig {
            enabled: true,
            lambda: 0.0,
            ..SiftConfig::default()
        };
        let zero = row_loss(&m, &task, Some(&cfg), Some(4), true).unwrap();
        assert_eq!(plain.total.to_bits(), zero.total.to_bits());
        assert_eq!(plain.grads, zero.grads);
    }

    #[test]
    fn regularizer_tiny_at_tiny_epsilon() {
        let m = tiny();
        let tokens = [2u32, 6, 7, 8, 3];
        let task = Task::Arlm { tokens: &tokens };
        let cfg = SiftConfig {
            enabled: true,
            epsilon: 1e-8,
            ..SiftConfig::default()
        };
        let r = regularizer(&m, &task, &cfg, None, 1).unwrap();
        assert!((0.0..1e-10).contains(&r), "{r}");
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = SiftConfig {
            lambda: -1.0,
            ..SiftConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "sift.lambda");
    }
}
