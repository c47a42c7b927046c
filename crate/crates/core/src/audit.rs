//! Self-contained audits: naive-vs-efficient kernel equivalence, the
//! allocation growth check, and the parameter/cost report.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{
    disentangled_attention, extra_param_count, scores_efficient_metered, scores_naive_metered,
    AllocMeter, AttentionInput, AttentionMask, AttentionParams, AttentionSettings, AttentionVars,
    KernelFault, ScoreTerms,
};
use crate::config::{Kernel, ModelConfig};
use crate::nn::Dropout;
use crate::par;
use crate::relpos::{max_reach, DeltaMatrix, RelPosTable};
use crate::tape::Tape;
use crate::tensor::{Result, Tensor};

pub const SCORE_TOLERANCE: f64 = 1e-10;
pub const GRAD_TOLERANCE: f64 = 1e-8;

/// One randomized equivalence case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub heads: usize,
    pub share: bool,
}

impl Case {
    /// Sweeps `n` over `1..=64` (seed 0 gives `n = 1`), `d ∈ {8, 16}`,
    /// `k ∈ {2, 4, 8}`.
    pub fn for_seed(seed: u64) -> Self {
        let d = [8, 16][(seed % 2) as usize];
        Self {
            seed,
            n: 1 + (seed as usize * 37) % 64,
            d,
            k: [2, 4, 8][(seed % 3) as usize],
            heads: [1, 2, 4][((seed / 2) % 3) as usize],
            share: seed % 5 == 4,
        }
    }

    fn inputs(&self) -> (Tensor, AttentionParams, RelPosTable, DeltaMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
        let h = Tensor::new(vec![self.n, self.d], normal(self.n * self.d)).expect("shape");
        let table =
            Tensor::new(vec![2 * self.k, self.d], normal(2 * self.k * self.d)).expect("shape");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xA77E);
        let p = AttentionParams::random(
            self.d,
            self.heads,
            ScoreTerms::FULL,
            self.share,
            0.5,
            &mut rng,
        );
        (
            h,
            p,
            RelPosTable::new(self.k, table).expect("table"),
            DeltaMatrix::new(self.n, self.k).expect("delta"),
        )
    }
}

/// Worst disagreements for one case across all four term combinations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseResult {
    pub case: Case,
    pub score_diff: f64,
    pub grad_diff: f64,
}

/// Compares the plain kernels' scores and the tape kernels' gradients.
pub fn check_case(case: Case, fault: Option<KernelFault>) -> Result<CaseResult> {
    let (h, base, table, dm) = case.inputs();
    let mut score_diff: f64 = 0.0;
    let mut grad_diff: f64 = 0.0;
    for terms in ScoreTerms::ALL {
        let p = AttentionParams {
            terms,
            ..base.clone()
        };
        let naive = scores_naive_metered(&h, &p, &table, &dm, None)?;
        let eff = scores_efficient_metered(&h, &p, &table, &dm, None, fault)?;
        score_diff = score_diff.max(naive.max_abs_diff(&eff));
        let gn = tape_grads(&h, &p, &table, &dm, Kernel::Naive, case.seed)?;
        let ge = tape_grads(&h, &p, &table, &dm, Kernel::Efficient, case.seed)?;
        for (a, b) in gn.iter().zip(&ge) {
            grad_diff = grad_diff.max(a.max_abs_diff(b));
        }
    }
    Ok(CaseResult {
        case,
        score_diff,
        grad_diff,
    })
}

/// Gradients of `Σ R ⊙ attention(h)` with respect to the input, the table
/// and every projection.
fn tape_grads(
    h: &Tensor,
    p: &AttentionParams,
    table: &RelPosTable,
    dm: &DeltaMatrix,
    kernel: Kernel,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let hv = tape.param(h.clone());
    let rel = tape.param(table.table().clone());
    let vars = AttentionVars::bind(&mut tape, p);
    let input = AttentionInput {
        query: hv,
        kv: hv,
        rel: Some(rel),
        delta: Arc::new(dm.index().clone()),
        query_pos: None,
    };
    let settings = AttentionSettings {
        heads: p.heads,
        terms: p.terms,
        kernel,
        attention_dropout: 0.0,
    };
    let out = disentangled_attention(
        &mut tape,
        &input,
        &vars,
        &settings,
        &AttentionMask::none(),
        &mut Dropout::disabled(),
        None,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0B5E);
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = tape.constant(Tensor::new(
        shape,
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )?);
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let mut leaves = vec![hv, rel, vars.w_qc, vars.w_kc, vars.w_vc, vars.w_o, vars.b_o];
    leaves.extend(vars.w_qr);
    leaves.extend(vars.w_kr);
    Ok(leaves
        .into_iter()
        .map(|v| {
            tape.grad_tensor(v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect())
}

/// Pass/fail line of an audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub counterexample_seed: Option<u64>,
}

impl PropertyResult {
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        match self.counterexample_seed {
            Some(s) => format!(
                "{verdict} {}: {} (counterexample seed {s})",
                self.name, self.detail
            ),
            None => format!("{verdict} {}: {}", self.name, self.detail),
        }
    }
}

/// Runs `seeds` randomized cases and reports score and gradient agreement.
pub fn equivalence_suite(seeds: u64, fault: Option<KernelFault>) -> Result<Vec<PropertyResult>> {
    let results = par::map_range(seeds as usize, |s| {
        check_case(Case::for_seed(s as u64), fault)
    });
    let results: Vec<CaseResult> = results.into_iter().collect::<Result<_>>()?;
    let worst_score = results
        .iter()
        .max_by(|a, b| a.score_diff.total_cmp(&b.score_diff))
        .copied();
    let worst_grad = results
        .iter()
        .max_by(|a, b| a.grad_diff.total_cmp(&b.grad_diff))
        .copied();
    let first_bad_score = results.iter().find(|r| !(r.score_diff <= SCORE_TOLERANCE));
    let first_bad_grad = results.iter().find(|r| !(r.grad_diff <= GRAD_TOLERANCE));
    let n_one = results.iter().any(|r| r.case.n == 1);
    Ok(vec![
        PropertyResult {
            name: "score equivalence".into(),
            passed: first_bad_score.is_none(),
            detail: format!(
                "{seeds} seeds x 4 term sets, max |naive - efficient| = {:.3e} (tol {SCORE_TOLERANCE:e})",
                worst_score.map_or(0.0, |r| r.score_diff)
            ),
            counterexample_seed: first_bad_score.map(|r| r.case.seed),
        },
        PropertyResult {
            name: "gradient equivalence".into(),
            passed: first_bad_grad.is_none(),
            detail: format!(
                "max gradient difference = {:.3e} (tol {GRAD_TOLERANCE:e})",
                worst_grad.map_or(0.0, |r| r.grad_diff)
            ),
            counterexample_seed: first_bad_grad.map(|r| r.case.seed),
        },
        PropertyResult {
            name: "single-token edge".into(),
            passed: n_one,
            detail: if n_one {
                "N = 1 included".into()
            } else {
                "N = 1 not covered".into()
            },
            counterexample_seed: None,
        },
    ])
}

/// Peak allocations of both kernels' position paths at one size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AllocSample {
    pub n: usize,
    pub efficient_peak: usize,
    pub naive_peak: usize,
    pub efficient_bound: usize,
}

impl AllocSample {
    pub fn ratio(&self) -> f64 {
        self.naive_peak as f64 / self.efficient_peak as f64
    }
}

pub fn alloc_sample(n: usize, k: usize, d: usize, heads: usize) -> Result<AllocSample> {
    let case = Case {
        seed: n as u64,
        n,
        d,
        k,
        heads,
        share: false,
    };
    let (h, p, table, dm) = case.inputs();
    let me = AllocMeter::new();
    scores_efficient_metered(&h, &p, &table, &dm, Some(&me), None)?;
    let mn = AllocMeter::new();
    scores_naive_metered(&h, &p, &table, &dm, Some(&mn))?;
    Ok(AllocSample {
        n,
        efficient_peak: me.peak(),
        naive_peak: mn.peak(),
        efficient_bound: n * 2 * k + 2 * (2 * k * d),
    })
}

/// Allocation audit at `N ∈ {32, 64, 128}`, `k = 8`, `d = 16`.
pub fn allocation_audit() -> Result<(Vec<AllocSample>, Vec<PropertyResult>)> {
    let samples: Vec<AllocSample> = [32, 64, 128]
        .into_iter()
        .map(|n| alloc_sample(n, 8, 16, 4))
        .collect::<Result<_>>()?;
    let within = samples
        .iter()
        .all(|s| s.efficient_peak <= s.efficient_bound);
    let growth = samples[2].ratio() / samples[0].ratio();
    let bound_detail = samples
        .iter()
        .map(|s| format!("N={}: {} <= {}", s.n, s.efficient_peak, s.efficient_bound))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        samples.clone(),
        vec![
            PropertyResult {
                name: "efficient peak bound".into(),
                passed: within,
                detail: bound_detail,
                counterexample_seed: None,
            },
            PropertyResult {
                name: "allocation growth".into(),
                passed: growth > 4.0,
                detail: format!(
                    "naive/efficient ratio {:.2} at N=32, {:.2} at N=128 (growth {growth:.2}x, need > 4x)",
                    samples[0].ratio(),
                    samples[2].ratio()
                ),
                counterexample_seed: None,
            },
        ],
    ))
}

/// Static size and cost report for a configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub total_params: usize,
    pub extra_params: usize,
    pub emd_relative_cost: f64,
    pub max_reach: usize,
}

pub fn audit_report(config: &ModelConfig) -> AuditReport {
    AuditReport {
        total_params: config.total_params(),
        extra_params: extra_param_count(config),
        emd_relative_cost: config.emd_relative_cost(),
        max_reach: max_reach(config.max_relative_distance, config.layers),
    }
}

/// Thousands-separated integer.
pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}
