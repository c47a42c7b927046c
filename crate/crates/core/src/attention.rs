//! Disentangled self-attention.
//!
//! Scores are the sum of up to three terms per (query `i`, key `j`) pair:
//!
//! * content-to-content `Qc[i] · Kc[j]`
//! * content-to-position `Qc[i] · Kr[δ(i, j)]`
//! * position-to-content `Kc[j] · Qr[δ(j, i)]`
//!
//! with `Kr = P·W_kr`, `Qr = P·W_qr` and `P` the shared `2k × d` relative
//! table. The efficient kernel multiplies each query against all `2k`
//! projected positions once and then gathers by `δ`; the naive kernel
//! materialises one relative embedding per pair. Both exist as tape-free
//! functions (for audits and dumps) and as tape kernels (for training).

use std::cell::Cell;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Kernel, ModelConfig};
use crate::nn::{self, Dropout};
use crate::relpos::{DeltaMatrix, RelPosTable};
use crate::tape::{Tape, Var};
use crate::tensor::{IndexMatrix, Result, Tensor, TensorError, MASK_SENTINEL};

/// Which position terms contribute to the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreTerms {
    pub c2p: bool,
    pub p2c: bool,
}

impl ScoreTerms {
    pub const FULL: ScoreTerms = ScoreTerms {
        c2p: true,
        p2c: true,
    };

    /// All four on/off combinations.
    pub const ALL: [ScoreTerms; 4] = [
        ScoreTerms {
            c2p: true,
            p2c: true,
        },
        ScoreTerms {
            c2p: true,
            p2c: false,
        },
        ScoreTerms {
            c2p: false,
            p2c: true,
        },
        ScoreTerms {
            c2p: false,
            p2c: false,
        },
    ];

    /// Number of enabled terms, content-to-content included.
    pub fn count(self) -> usize {
        1 + usize::from(self.c2p) + usize::from(self.p2c)
    }

    /// `1/√(τ·head_size)` with `τ` the enabled-term count.
    pub fn scale(self, head_size: usize) -> f64 {
        1.0 / ((self.count() * head_size) as f64).sqrt()
    }

    pub fn uses_position(self) -> bool {
        self.c2p || self.p2c
    }
}

/// Deliberate defects used to prove the equivalence audit can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFault {
    /// Index position-to-content scores with `δ(i,j)` instead of `δ(j,i)`.
    SwapDelta,
}

/// Projection weights for one attention layer, as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_qc: Tensor,
    pub w_kc: Tensor,
    pub w_vc: Tensor,
    /// `None` when the position projections alias the content ones.
    pub w_qr: Option<Tensor>,
    pub w_kr: Option<Tensor>,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub heads: usize,
    pub terms: ScoreTerms,
}

impl AttentionParams {
    /// Gaussian-initialised parameters, for tests and audits.
    pub fn random<R: Rng>(
        d: usize,
        heads: usize,
        terms: ScoreTerms,
        share: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut mat = |r: usize, c: usize| {
            let data = (0..r * c)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(vec![r, c], data).expect("shape")
        };
        let w_qc = mat(d, d);
        let w_kc = mat(d, d);
        let w_vc = mat(d, d);
        let w_qr = (!share).then(|| mat(d, d));
        let w_kr = (!share).then(|| mat(d, d));
        let w_o = mat(d, d);
        let b_o = mat(1, d).reshaped(vec![d]).expect("shape");
        Self {
            w_qc,
            w_kc,
            w_vc,
            w_qr,
            w_kr,
            w_o,
            b_o,
            heads,
            terms,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_qc.last_dim()
    }

    pub fn head_size(&self) -> usize {
        self.hidden() / self.heads
    }

    pub fn shares_projection(&self) -> bool {
        self.w_qr.is_none() && self.w_kr.is_none()
    }

    pub fn position_query(&self) -> &Tensor {
        self.w_qr.as_ref().unwrap_or(&self.w_qc)
    }

    pub fn position_key(&self) -> &Tensor {
        self.w_kr.as_ref().unwrap_or(&self.w_kc)
    }

    fn check(&self, h: &Tensor, table: &RelPosTable, dm: &DeltaMatrix) -> Result<usize> {
        let (n, d) = h.dims2("attention")?;
        if d != self.hidden() || table.dim() != d {
            return Err(TensorError::DimensionMismatch {
                op: "attention",
                left: h.shape().to_vec(),
                right: table.table().shape().to_vec(),
            });
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(TensorError::DimensionMismatch {
                op: "attention heads",
                left: vec![d],
                right: vec![self.heads],
            });
        }
        if dm.len() != n || dm.k() != table.k() {
            return Err(TensorError::DimensionMismatch {
                op: "attention delta",
                left: vec![n, table.k()],
                right: vec![dm.len(), dm.k()],
            });
        }
        Ok(n)
    }
}

/// Per-head score components (unscaled). Disabled components are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub c2c: Vec<Tensor>,
    pub c2p: Vec<Tensor>,
    pub p2c: Vec<Tensor>,
    pub total: Vec<Tensor>,
    pub scale: f64,
}

impl AttentionScores {
    pub fn max_abs_diff(&self, other: &AttentionScores) -> f64 {
        let parts = |s: &AttentionScores| {
            s.c2c
                .iter()
                .chain(&s.c2p)
                .chain(&s.p2c)
                .chain(&s.total)
                .cloned()
                .collect::<Vec<_>>()
        };
        parts(self)
            .iter()
            .zip(parts(other).iter())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Counts numbers held by position-path intermediates.
#[derive(Debug, Default)]
pub struct AllocMeter {
    live: Cell<usize>,
    peak: Cell<usize>,
    total: Cell<usize>,
}

impl AllocMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, n: usize) {
        self.live.set(self.live.get() + n);
        self.total.set(self.total.get() + n);
        self.peak.set(self.peak.get().max(self.live.get()));
    }

    pub fn free(&self, n: usize) {
        self.live.set(self.live.get() - n);
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    pub fn total(&self) -> usize {
        self.total.get()
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }
}

fn meter_alloc(m: Option<&AllocMeter>, n: usize) {
    if let Some(m) = m {
        m.alloc(n);
    }
}

fn meter_free(m: Option<&AllocMeter>, n: usize) {
    if let Some(m) = m {
        m.free(n);
    }
}

struct Projected {
    n: usize,
    hs: usize,
    q: Tensor,
    k: Tensor,
}

fn project_content(h: &Tensor, p: &AttentionParams) -> Result<Projected> {
    let (n, _) = h.dims2("attention")?;
    Ok(Projected {
        n,
        hs: p.head_size(),
        q: h.matmul(&p.w_qc)?,
        k: h.matmul(&p.w_kc)?,
    })
}

/// Reference kernel: builds the relative key and query embedding for every
/// (query, key) pair, `O(N²·d)` extra storage.
pub fn scores_naive(
    h: &Tensor,
    params: &AttentionParams,
    table: &RelPosTable,
    dm: &DeltaMatrix,
) -> Result<AttentionScores> {
    scores_naive_metered(h, params, table, dm, None)
}

pub fn scores_naive_metered(
    h: &Tensor,
    params: &AttentionParams,
    table: &RelPosTable,
    dm: &DeltaMatrix,
    meter: Option<&AllocMeter>,
) -> Result<AttentionScores> {
    params.check(h, table, dm)?;
    let Projected { n, hs, q, k } = project_content(h, params)?;
    let d = params.hidden();
    let terms = params.terms;
    let two_k = 2 * table.k();

    let kr = if terms.c2p {
        meter_alloc(meter, two_k * d);
        Some(table.table().matmul(params.position_key())?)
    } else {
        None
    };
    let qr = if terms.p2c {
        meter_alloc(meter, two_k * d);
        Some(table.table().matmul(params.position_query())?)
    } else {
        None
    };

    // rel_k[i][j] = Kr[δ(i,j)], rel_q[i][j] = Qr[δ(j,i)], each N×N×d
    let materialise = |src: &Tensor, swap: bool| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for j in 0..n {
                let r = if swap { dm.get(j, i) } else { dm.get(i, j) };
                out.extend_from_slice(src.row(r));
            }
        }
        out
    };
    let rel_k = kr.as_ref().map(|t| {
        meter_alloc(meter, n * n * d);
        materialise(t, false)
    });
    let rel_q = qr.as_ref().map(|t| {
        meter_alloc(meter, n * n * d);
        materialise(t, true)
    });

    let mut scores = AttentionScores {
        c2c: Vec::new(),
        c2p: Vec::new(),
        p2c: Vec::new(),
        total: Vec::new(),
        scale: terms.scale(hs),
    };
    for head in 0..params.heads {
        let off = head * hs;
        let mut c2c = vec![0.0; n * n];
        let mut c2p = vec![0.0; n * n];
        let mut p2c = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q.row(i)[off..off + hs];
            for j in 0..n {
                let kj = &k.row(j)[off..off + hs];
                c2c[i * n + j] = crate::tensor::dot(qi, kj);
                if let Some(rk) = &rel_k {
                    let base = (i * n + j) * d + off;
                    c2p[i * n + j] = crate::tensor::dot(qi, &rk[base..base + hs]);
                }
                if let Some(rq) = &rel_q {
                    let base = (i * n + j) * d + off;
                    p2c[i * n + j] = crate::tensor::dot(kj, &rq[base..base + hs]);
                }
            }
        }
        let total: Vec<f64> = (0..n * n).map(|x| c2c[x] + c2p[x] + p2c[x]).collect();
        scores.c2c.push(Tensor::new(vec![n, n], c2c)?);
        scores.c2p.push(Tensor::new(vec![n, n], c2p)?);
        scores.p2c.push(Tensor::new(vec![n, n], p2c)?);
        scores.total.push(Tensor::new(vec![n, n], total)?);
    }
    if rel_k.is_some() {
        meter_free(meter, n * n * d + two_k * d);
    }
    if rel_q.is_some() {
        meter_free(meter, n * n * d + two_k * d);
    }
    Ok(scores)
}

/// Efficient kernel: `Kr`, `Qr` are projected once (`2k × d` each); each head
/// computes an `N × 2k` product and gathers it through `δ`.
pub fn scores_efficient(
    h: &Tensor,
    params: &AttentionParams,
    table: &RelPosTable,
    dm: &DeltaMatrix,
) -> Result<AttentionScores> {
    scores_efficient_metered(h, params, table, dm, None, None)
}

pub fn scores_efficient_metered(
    h: &Tensor,
    params: &AttentionParams,
    table: &RelPosTable,
    dm: &DeltaMatrix,
    meter: Option<&AllocMeter>,
    fault: Option<KernelFault>,
) -> Result<AttentionScores> {
    params.check(h, table, dm)?;
    let Projected { n, hs, q, k } = project_content(h, params)?;
    let d = params.hidden();
    let terms = params.terms;
    let two_k = 2 * table.k();

    let kr = if terms.c2p {
        meter_alloc(meter, two_k * d);
        Some(table.table().matmul(params.position_key())?)
    } else {
        None
    };
    let qr = if terms.p2c {
        meter_alloc(meter, two_k * d);
        Some(table.table().matmul(params.position_query())?)
    } else {
        None
    };

    let mut scores = AttentionScores {
        c2c: Vec::new(),
        c2p: Vec::new(),
        p2c: Vec::new(),
        total: Vec::new(),
        scale: terms.scale(hs),
    };
    for head in 0..params.heads {
        let qh = q.slice_cols(head * hs, hs)?;
        let kh = k.slice_cols(head * hs, hs)?;
        let c2c = qh.matmul_nt(&kh)?;

        let c2p = match &kr {
            Some(kr) => {
                meter_alloc(meter, n * two_k);
                let full = qh.matmul_nt(&kr.slice_cols(head * hs, hs)?)?;
                let g = crate::tape::gather_cols_forward(&full, dm, None, false)?;
                meter_free(meter, n * two_k);
                g
            }
            None => Tensor::zeros(&[n, n]),
        };
        let p2c = match &qr {
            Some(qr) => {
                meter_alloc(meter, n * two_k);
                let full = kh.matmul_nt(&qr.slice_cols(head * hs, hs)?)?;
                let g = match fault {
                    Some(KernelFault::SwapDelta) => swapped_p2c_gather(&full, dm),
                    None => crate::tape::gather_cols_forward(&full, dm, None, true)?,
                };
                meter_free(meter, n * two_k);
                g
            }
            None => Tensor::zeros(&[n, n]),
        };
        let total: Vec<f64> = (0..n * n)
            .map(|x| c2c.data()[x] + c2p.data()[x] + p2c.data()[x])
            .collect();
        scores.c2c.push(c2c);
        scores.c2p.push(c2p);
        scores.p2c.push(p2c);
        scores.total.push(Tensor::new(vec![n, n], total)?);
    }
    if kr.is_some() {
        meter_free(meter, two_k * d);
    }
    if qr.is_some() {
        meter_free(meter, two_k * d);
    }
    Ok(scores)
}

fn swapped_p2c_gather(full: &Tensor, dm: &DeltaMatrix) -> Tensor {
    let n = dm.len();
    let sc = full.last_dim();
    let data = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| full.data()[j * sc + dm.get(i, j)])
        .collect();
    Tensor::new(vec![n, n], data).expect("shape")
}

// ---------------------------------------------------------------------------
// Tape kernels

/// Attention weights bound on a tape. With projection sharing `w_qr` and
/// `w_kr` are the same `Var`s as `w_qc`/`w_kc`, so both paths accumulate into
/// one gradient.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_qc: Var,
    pub w_kc: Var,
    pub w_vc: Var,
    pub w_qr: Option<Var>,
    pub w_kr: Option<Var>,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionVars {
    /// Binds plain parameters as differentiable leaves.
    pub fn bind(tape: &mut Tape, p: &AttentionParams) -> Self {
        let w_qc = tape.param(p.w_qc.clone());
        let w_kc = tape.param(p.w_kc.clone());
        let w_vc = tape.param(p.w_vc.clone());
        let w_qr = Some(match &p.w_qr {
            Some(t) => tape.param(t.clone()),
            None => w_qc,
        });
        let w_kr = Some(match &p.w_kr {
            Some(t) => tape.param(t.clone()),
            None => w_kc,
        });
        let w_o = tape.param(p.w_o.clone());
        let b_o = tape.param(p.b_o.clone());
        Self {
            w_qc,
            w_kc,
            w_vc,
            w_qr,
            w_kr,
            w_o,
            b_o,
        }
    }
}

/// Which keys each query may see.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionMask {
    /// `false` marks padding keys.
    pub key_valid: Option<Vec<bool>>,
    /// Hide keys after the query position.
    pub causal: bool,
}

impl AttentionMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            key_valid: None,
            causal: true,
        }
    }

    pub fn padding(key_valid: Vec<bool>) -> Self {
        Self {
            key_valid: Some(key_valid),
            causal: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.causal && self.key_valid.as_ref().is_none_or(|v| v.iter().all(|&b| b))
    }

    /// Additive `nq × nk` mask: 0 where visible, the sentinel elsewhere.
    pub fn additive(&self, query_pos: &[usize], nk: usize) -> Tensor {
        let mut data = Vec::with_capacity(query_pos.len() * nk);
        for &qp in query_pos {
            for j in 0..nk {
                let hidden =
                    (self.causal && j > qp) || self.key_valid.as_ref().is_some_and(|v| !v[j]);
                data.push(if hidden { MASK_SENTINEL } else { 0.0 });
            }
        }
        Tensor::new(vec![query_pos.len(), nk], data).expect("shape")
    }
}

/// Everything about one attention call except the weights.
pub struct AttentionInput {
    /// Query-side states, `nq × d`.
    pub query: Var,
    /// Key/value-side states, `nk × d`.
    pub kv: Var,
    /// Relative table `P`, `2k × d` (ignored when no position term is on).
    pub rel: Option<Var>,
    /// `nk × nk` relative-distance matrix.
    pub delta: Arc<IndexMatrix>,
    /// Absolute positions of the query rows; `None` means `0..nk`.
    pub query_pos: Option<Arc<[usize]>>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionSettings {
    pub heads: usize,
    pub terms: ScoreTerms,
    pub kernel: Kernel,
    pub attention_dropout: f64,
}

/// Unscaled summed scores for one head on the tape.
#[allow(clippy::too_many_arguments)]
fn head_scores(
    tape: &mut Tape,
    kernel: Kernel,
    qh: Var,
    kh: Var,
    krh: Option<Var>,
    qrh: Option<Var>,
    delta: &Arc<IndexMatrix>,
    qpos: &Arc<[usize]>,
    select: &Option<Arc<[usize]>>,
) -> Result<Var> {
    let mut total = tape.matmul_nt(qh, kh)?;
    let nq = qpos.len();
    let nk = delta.rows();
    if let Some(krh) = krh {
        let c2p = match kernel {
            Kernel::Efficient => {
                let full = tape.matmul_nt(qh, krh)?;
                tape.gather_cols(full, Arc::clone(delta), select.clone(), false)?
            }
            Kernel::Naive => {
                let rel_idx: Vec<usize> = qpos
                    .iter()
                    .flat_map(|&qp| (0..nk).map(move |j| delta.get(qp, j)))
                    .collect();
                let rep: Vec<usize> = (0..nq).flat_map(|r| std::iter::repeat_n(r, nk)).collect();
                let rel = tape.gather_rows(krh, rel_idx)?;
                let qrep = tape.gather_rows(qh, rep)?;
                let prod = tape.mul(qrep, rel)?;
                let s = tape.row_sum(prod)?;
                tape.reshape(s, vec![nq, nk])?
            }
        };
        total = tape.add(total, c2p)?;
    }
    if let Some(qrh) = qrh {
        let p2c = match kernel {
            Kernel::Efficient => {
                let full = tape.matmul_nt(kh, qrh)?;
                tape.gather_cols(full, Arc::clone(delta), select.clone(), true)?
            }
            Kernel::Naive => {
                let rel_idx: Vec<usize> = qpos
                    .iter()
                    .flat_map(|&qp| (0..nk).map(move |j| delta.get(j, qp)))
                    .collect();
                let tile: Vec<usize> = (0..nq).flat_map(|_| 0..nk).collect();
                let rel = tape.gather_rows(qrh, rel_idx)?;
                let ktile = tape.gather_rows(kh, tile)?;
                let prod = tape.mul(ktile, rel)?;
                let s = tape.row_sum(prod)?;
                tape.reshape(s, vec![nq, nk])?
            }
        };
        total = tape.add(total, p2c)?;
    }
    Ok(total)
}

/// Multi-head disentangled attention followed by the output projection.
///
/// When `probs` is given, the per-head post-softmax matrices are appended to
/// it (for pattern dumps).
pub fn disentangled_attention(
    tape: &mut Tape,
    input: &AttentionInput,
    vars: &AttentionVars,
    settings: &AttentionSettings,
    mask: &AttentionMask,
    dropout: &mut Dropout,
    mut probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (nk, d) = tape.value(input.kv).dims2("attention kv")?;
    let (nq, dq) = tape.value(input.query).dims2("attention query")?;
    if d != dq {
        return Err(TensorError::DimensionMismatch {
            op: "attention",
            left: vec![nq, dq],
            right: vec![nk, d],
        });
    }
    if input.delta.rows() != nk {
        return Err(TensorError::DimensionMismatch {
            op: "attention delta",
            left: vec![nk, nk],
            right: vec![input.delta.rows(), input.delta.cols()],
        });
    }
    let heads = settings.heads;
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::DimensionMismatch {
            op: "attention heads",
            left: vec![d],
            right: vec![heads],
        });
    }
    let hs = d / heads;
    let qpos: Arc<[usize]> = match &input.query_pos {
        Some(p) if p.len() == nq => Arc::clone(p),
        Some(p) => {
            return Err(TensorError::DimensionMismatch {
                op: "attention query positions",
                left: vec![nq],
                right: vec![p.len()],
            })
        }
        None if nq == nk => (0..nq).collect(),
        None => {
            return Err(TensorError::DimensionMismatch {
                op: "attention query positions",
                left: vec![nq],
                right: vec![nk],
            })
        }
    };
    let terms = settings.terms;

    let q = tape.matmul(input.query, vars.w_qc)?;
    let k = tape.matmul(input.kv, vars.w_kc)?;
    let v = tape.matmul(input.kv, vars.w_vc)?;
    let position_rel = |tape: &mut Tape, w: Option<Var>| -> Result<Option<Var>> {
        match (input.rel, w) {
            (Some(p), Some(w)) => Ok(Some(tape.matmul(p, w)?)),
            _ => Err(TensorError::Rank {
                op: "attention: position term enabled without table/projection",
                expected: 2,
                shape: vec![],
            }),
        }
    };
    let kr = if terms.c2p {
        position_rel(tape, vars.w_kr)?
    } else {
        None
    };
    let qr = if terms.p2c {
        position_rel(tape, vars.w_qr)?
    } else {
        None
    };

    let mask_t = (!mask.is_empty()).then(|| tape.constant(mask.additive(&qpos, nk)));
    let scale = terms.scale(hs);

    let mut heads_out = Vec::with_capacity(heads);
    for head in 0..heads {
        let off = head * hs;
        let qh = tape.slice_cols(q, off, hs)?;
        let kh = tape.slice_cols(k, off, hs)?;
        let vh = tape.slice_cols(v, off, hs)?;
        let krh = kr.map(|x| tape.slice_cols(x, off, hs)).transpose()?;
        let qrh = qr.map(|x| tape.slice_cols(x, off, hs)).transpose()?;
        let raw = head_scores(
            tape,
            settings.kernel,
            qh,
            kh,
            krh,
            qrh,
            &input.delta,
            &qpos,
            &input.query_pos,
        )?;
        let mut s = tape.scale(raw, scale);
        if let Some(m) = mask_t {
            s = tape.add(s, m)?;
        }
        let p = tape.softmax_rows(s)?;
        if let Some(out) = probs.as_deref_mut() {
            out.push(p);
        }
        let p = dropout.apply_with(settings.attention_dropout, tape, p)?;
        heads_out.push(tape.matmul(p, vh)?);
    }
    let ctx = if heads == 1 {
        heads_out[0]
    } else {
        tape.concat_cols(&heads_out)?
    };
    nn::linear(tape, ctx, vars.w_o, Some(vars.b_o))
}

/// Tape-free attention forward: `softmax(scale·Ã + mask)·V`, heads
/// concatenated and output-projected. Returns the output and the per-head
/// attention probabilities.
pub fn attend(
    h: &Tensor,
    params: &AttentionParams,
    table: &RelPosTable,
    dm: &DeltaMatrix,
    mask: &AttentionMask,
) -> Result<(Tensor, Vec<Tensor>)> {
    params.check(h, table, dm)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let rel = tape.constant(table.table().clone());
    let vars = AttentionVars::bind(&mut tape, params);
    let input = AttentionInput {
        query: hv,
        kv: hv,
        rel: Some(rel),
        delta: Arc::new(dm.index().clone()),
        query_pos: None,
    };
    let settings = AttentionSettings {
        heads: params.heads,
        terms: params.terms,
        kernel: Kernel::Efficient,
        attention_dropout: 0.0,
    };
    let mut probs = Vec::new();
    let out = disentangled_attention(
        &mut tape,
        &input,
        &vars,
        &settings,
        mask,
        &mut Dropout::disabled(),
        Some(&mut probs),
    )?;
    let probs = probs.into_iter().map(|p| tape.value(p).clone()).collect();
    Ok((tape.value(out).clone(), probs))
}

/// Extra parameters introduced by disentangled attention: the `2L` position
/// projections plus the shared table, or only the table under sharing.
pub fn extra_param_count(config: &ModelConfig) -> usize {
    let d = config.hidden;
    let table = 2 * config.max_relative_distance * d;
    if config.share_projection {
        table
    } else {
        2 * config.layers * d * d + table
    }
}

/// Format a value with six significant digits (`%g` style).
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    // rounding may bump the exponent (e.g. 9.999996 -> 10.0000)
    let sci = format!("{v:.5e}");
    let exp = sci
        .split_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let (mant, e) = sci.split_once('e').expect("scientific");
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{e}")
    }
}

/// CSV text of a probability matrix: one row per line, 6 significant digits.
pub fn probs_to_csv(t: &Tensor) -> String {
    let cols = t.last_dim();
    let mut s = String::new();
    for row in t.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|&v| format_sig6(v)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}
