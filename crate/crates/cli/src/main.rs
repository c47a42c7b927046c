//! `dalm` — pre-train, evaluate, audit and inspect disentangled-attention
//! models.
//!
//! Exit codes: 0 success, 1 property failure, 2 usage/config error,
//! 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dalm::attention::{format_sig6, probs_to_csv, KernelFault};
use dalm::audit::{self, group_thousands, PropertyResult};
use dalm::checkpoint::{self, canonical_json, CheckpointError};
use dalm::config::ConfigError;
use dalm::data::documents_to_sequences;
use dalm::model::{Model, ModelError};
use dalm::run::{self, RunConfig};
use dalm::trainer::{self, OutputPaths, TrainError, ABLATION_VARIANTS};

#[derive(Parser)]
#[command(
    name = "dalm",
    version,
    about = "Disentangled-attention language models at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.steps=10`; repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; the effective configuration is echoed here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set trainer.seed=N`, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Fault {
    SwapDelta,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics log and config snapshot.
    Pretrain(Common),
    /// Print corpus perplexity (a fresh model when no checkpoint is given).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write per-position NLL as CSV to this file.
        #[arg(long)]
        per_position: Option<PathBuf>,
    },
    /// Print parameter counts, decoder cost and receptive reach.
    Audit(Common),
    /// Write per-layer, per-head attention matrices for a text.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Naive-vs-efficient kernel equivalence and allocation audits.
    Equivalence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Inject a known kernel defect (for testing the audit itself).
        #[arg(long, value_enum)]
        fault: Option<Fault>,
    },
    /// Train all six ablation variants on one batch stream.
    AblationSuite(Common),
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: m.to_string(),
        }
    }

    fn runtime(m: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: m.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::usage(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => Self::usage(c),
            TrainError::Data(d) => Self::usage(d),
            other => Self::runtime(other),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(c) => Self::usage(c),
            ModelError::TokenOutOfVocab { .. } | ModelError::TooLong { .. } => Self::usage(e),
            other => Self::runtime(other),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            // Missing/unreadable/mismatched checkpoints are caller errors.
            other => Self::usage(other),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(io(path))
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("trainer.seed={s}"));
    }
    Ok(RunConfig::load(c.config.as_deref(), &overrides)?)
}

fn config_dir(c: &Common) -> Option<&Path> {
    c.config.as_deref().and_then(Path::parent)
}

/// Creates the output directory and writes `config.json` into it.
fn echo_config(out: Option<&Path>, cfg: &RunConfig) -> Result<(), Failure> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io(dir))?;
        write(
            &dir.join("config.json"),
            &format!("{}\n", cfg.to_canonical_json()),
        )?;
    }
    Ok(())
}

fn required_out(c: &Common) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_pretrain(c: &Common) -> Result<u8, Failure> {
    let cfg = load_config(c)?;
    let out = required_out(c);
    echo_config(Some(&out), &cfg)?;
    let prep = run::prepare(&cfg, config_dir(c))?;
    let mut model = Model::new(prep.model, cfg.trainer.seed)?;
    let paths = OutputPaths { dir: out.clone() };
    let report = trainer::train(
        &mut model,
        &prep.vocab,
        &prep.train,
        &cfg.trainer,
        &cfg.sift,
        Some(&paths),
    )?;
    let last = report.metrics.last().expect("at least one step");
    println!(
        "trained {} steps: loss {} mlm_loss {} perplexity {}",
        last.step,
        format_sig6(last.loss),
        last.mlm_loss.map_or("-".into(), format_sig6),
        last.perplexity.map_or("-".into(), format_sig6),
    );
    println!("checkpoint: {}", paths.checkpoint().display());
    Ok(0)
}

fn cmd_eval(c: &Common, ckpt: Option<&Path>, per_position: Option<&Path>) -> Result<u8, Failure> {
    let cfg = load_config(c)?;
    echo_config(c.out.as_deref(), &cfg)?;
    let text = run::read_corpus(
        "data.eval_corpus",
        cfg.data
            .eval_corpus
            .as_deref()
            .or(cfg.data.corpus.as_deref()),
        config_dir(c),
    )?;
    let (model, vocab) = match ckpt {
        Some(p) => {
            let (model, vocab) = checkpoint::load(p)?;
            if c.config.is_some() || !c.overrides.is_empty() {
                let mut want = cfg.model.clone();
                want.vocab_size = model.config.vocab_size;
                if want != model.config {
                    return Err(Failure::usage(format!(
                        "checkpoint {} was trained with a different model configuration than the one given",
                        p.display()
                    )));
                }
            }
            (model, vocab)
        }
        None => {
            let prep = run::prepare(&cfg, config_dir(c))?;
            (Model::new(prep.model, cfg.trainer.seed)?, prep.vocab)
        }
    };
    let seqs = documents_to_sequences(&text, &vocab, model.config.max_len);
    let report = trainer::evaluate_ppl(&model, &seqs)?;
    println!("{:.6}", report.perplexity);
    if let Some(p) = per_position {
        let mut s = String::from("sequence,position,nll\n");
        for (i, pos, nll) in &report.per_position {
            s.push_str(&format!("{i},{pos},{}\n", format_sig6(*nll)));
        }
        write(p, &s)?;
    }
    Ok(0)
}

fn cmd_audit(c: &Common) -> Result<u8, Failure> {
    let cfg = load_config(c)?;
    echo_config(c.out.as_deref(), &cfg)?;
    let r = audit::audit_report(&cfg.model);
    println!(
        "total_params: {} ({})",
        r.total_params,
        group_thousands(r.total_params)
    );
    println!(
        "extra_params: {} ({})",
        r.extra_params,
        group_thousands(r.extra_params)
    );
    println!("emd_relative_cost: {}", format_sig6(r.emd_relative_cost));
    println!(
        "max_reach: {} ({})",
        r.max_reach,
        group_thousands(r.max_reach)
    );
    if let Some(dir) = &c.out {
        write(
            &dir.join("audit.json"),
            &format!("{}\n", canonical_json(&r)),
        )?;
    }
    Ok(0)
}

fn cmd_dump_attention(c: &Common, ckpt: &Path, text: &str) -> Result<u8, Failure> {
    let cfg = load_config(c)?;
    let out = required_out(c);
    let (model, vocab) = checkpoint::load(ckpt)?;
    let tokens = vocab.encode(text);
    if tokens.is_empty() {
        return Err(Failure::usage("--text contains no tokens"));
    }
    echo_config(Some(&out), &cfg)?;
    let maps = model.attention_maps(&tokens)?;
    let layers = maps.len();
    let mut files = Vec::new();
    for (l, heads) in maps.iter().enumerate() {
        for (h, probs) in heads.iter().enumerate() {
            let name = format!("layer{l}_head{h}.csv");
            write(&out.join(&name), &probs_to_csv(probs))?;
            files.push(json!({"layer": l, "head": h, "file": name, "last_layer": l + 1 == layers}));
        }
    }
    let words: Vec<&str> = tokens
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("[UNK]"))
        .collect();
    let manifest = json!({
        "checkpoint": ckpt.display().to_string(),
        "tokens": words,
        "n": tokens.len(),
        "layers": layers,
        "heads": model.config.heads,
        "files": files,
    });
    write(
        &out.join("manifest.json"),
        &format!("{}\n", canonical_json(&manifest)),
    )?;
    println!(
        "wrote {} attention matrices to {}",
        files.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_equivalence(c: &Common, seeds: u64, fault: Option<Fault>) -> Result<u8, Failure> {
    let cfg = load_config(c)?;
    echo_config(c.out.as_deref(), &cfg)?;
    let fault = fault.map(|Fault::SwapDelta| KernelFault::SwapDelta);
    let mut results: Vec<PropertyResult> =
        audit::equivalence_suite(seeds, fault).map_err(Failure::runtime)?;
    let (samples, alloc) = audit::allocation_audit().map_err(Failure::runtime)?;
    results.extend(alloc);
    for s in &samples {
        println!(
            "alloc N={}: efficient peak {} (bound {}), naive peak {}, ratio {:.2}",
            s.n,
            s.efficient_peak,
            s.efficient_bound,
            s.naive_peak,
            s.ratio()
        );
    }
    for r in &results {
        println!("{}", r.line());
    }
    if let Some(dir) = &c.out {
        write(
            &dir.join("equivalence.json"),
            &format!(
                "{}\n",
                canonical_json(&json!({"results": results, "allocation": samples}))
            ),
        )?;
    }
    Ok(if results.iter().all(|r| r.passed) {
        0
    } else {
        1
    })
}

fn cmd_ablation_suite(c: &Common) -> Result<u8, Failure> {
    let cfg = load_config(c)?;
    let out = required_out(c);
    echo_config(Some(&out), &cfg)?;
    let prep = run::prepare(&cfg, config_dir(c))?;
    let rows = trainer::run_ablation_suite(
        &prep.model,
        &prep.vocab,
        &prep.train,
        &cfg.trainer,
        &cfg.sift,
        Some(&out),
    )?;
    let csv = trainer::ablation_csv(&rows);
    write(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");

    let full = rows[0].final_mlm_loss;
    let doubles: Vec<_> = rows.iter().filter(|r| r.variant.contains('+')).collect();
    let ordering_holds = full.is_some_and(|f| {
        doubles
            .iter()
            .all(|r| r.final_mlm_loss.is_some_and(|l| f <= l))
    });
    let hashes_equal = rows.iter().all(|r| r.batch_hash == rows[0].batch_hash);
    println!("batch streams identical: {hashes_equal}");
    println!("full <= every doubly-ablated variant (expected, not enforced): {ordering_holds}");
    let summary = json!({
        "variants": ABLATION_VARIANTS,
        "batch_hashes": rows.iter().map(|r| r.batch_hash.clone()).collect::<Vec<_>>(),
        "batch_streams_identical": hashes_equal,
        "full_not_worse_than_double_ablations": ordering_holds,
    });
    write(
        &out.join("ablation.json"),
        &format!("{}\n", canonical_json(&summary)),
    )?;
    Ok(if hashes_equal { 0 } else { 3 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Pretrain(c) => cmd_pretrain(c),
        Command::Eval {
            common,
            checkpoint,
            per_position,
        } => cmd_eval(common, checkpoint.as_deref(), per_position.as_deref()),
        Command::Audit(c) => cmd_audit(c),
        Command::DumpAttention {
            common,
            checkpoint,
            text,
        } => cmd_dump_attention(common, checkpoint, text),
        Command::Equivalence {
            common,
            seeds,
            fault,
        } => cmd_equivalence(common, *seeds, *fault),
        Command::AblationSuite(c) => cmd_ablation_suite(c),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
