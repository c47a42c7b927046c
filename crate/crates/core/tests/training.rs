use dalm::checkpoint;
use dalm::config::{ModelConfig, Objective};
use dalm::data::{build_vocab, documents_to_sequences, CorruptionConfig};
use dalm::model::Model;
use dalm::sift::SiftConfig;
use dalm::tensor::Tensor;
use dalm::trainer::{self, evaluate_ppl, OutputPaths, TrainConfig, TrainData, TrainError};

const TEXT: &str =
    "the cat sat on the mat .\nthe dog ran to the park .\na bird sang in the tree .\n";

fn setup(objective: Objective) -> (ModelConfig, dalm::data::Vocab, TrainData) {
    let vocab = build_vocab(TEXT, 100).unwrap();
    let cfg = ModelConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn_size: 32,
        max_relative_distance: 4,
        vocab_size: vocab.len(),
        max_len: 16,
        objective,
        ..ModelConfig::default()
    };
    let data = TrainData {
        sequences: documents_to_sequences(TEXT, &vocab, 10),
        seq_len: 12,
        corruption: CorruptionConfig::default(),
    };
    (cfg, vocab, data)
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 3,
        warmup_steps: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_logs_and_checkpoints() {
    let (cfg, vocab, data) = setup(Objective::Joint);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let sift = SiftConfig {
        enabled: true,
        ..SiftConfig::default()
    };
    let mut reports = Vec::new();
    for d in &dirs {
        let mut m = Model::new(cfg.clone(), 1).unwrap();
        let out = OutputPaths {
            dir: d.path().into(),
        };
        reports.push(trainer::train(&mut m, &vocab, &data, &short(6), &sift, Some(&out)).unwrap());
    }
    assert_eq!(reports[0].metrics, reports[1].metrics);
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(
        read(&dirs[0], "metrics.jsonl"),
        read(&dirs[1], "metrics.jsonl")
    );
    assert_eq!(
        read(&dirs[0], "checkpoint.bin"),
        read(&dirs[1], "checkpoint.bin")
    );
    let log = String::from_utf8(read(&dirs[0], "metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    // Joint alternates: odd records are MLM, even ones ARLM.
    assert_eq!(reports[0].metrics[0].objective, Objective::Mlm);
    assert_eq!(reports[0].metrics[1].objective, Objective::Arlm);
    assert!(reports[0]
        .metrics
        .iter()
        .all(|m| m.sift_reg.is_some_and(|r| r >= 0.0)));
    let (model, v) = checkpoint::load(&dirs[0].path().join("checkpoint.bin")).unwrap();
    assert_eq!(v, vocab);
    assert_eq!(model.config, cfg);
}

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let (cfg, vocab, data) = setup(Objective::Mlm);
    let run = |sequential: bool| {
        dalm::par::set_sequential(sequential);
        let mut m = Model::new(cfg.clone(), 2).unwrap();
        let r = trainer::train(
            &mut m,
            &vocab,
            &data,
            &short(3),
            &SiftConfig::default(),
            None,
        )
        .unwrap();
        dalm::par::set_sequential(false);
        (r.metrics, m.params)
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn uniform_logits_give_vocabulary_perplexity() {
    let (cfg, vocab, _) = setup(Objective::Arlm);
    let mut m = Model::new(cfg, 3).unwrap();
    let shape = m.params.get("embed.word").unwrap().shape().to_vec();
    m.params.set("embed.word", Tensor::zeros(&shape)).unwrap();
    let seqs = documents_to_sequences(TEXT, &vocab, 16);
    let r = evaluate_ppl(&m, &seqs).unwrap();
    assert!(
        (r.perplexity - vocab.len() as f64).abs() < 1e-9,
        "{}",
        r.perplexity
    );
    assert!(matches!(evaluate_ppl(&m, &[]), Err(TrainError::Data(_))));
}

#[test]
fn evaluation_is_independent_of_grouping() {
    let (cfg, vocab, _) = setup(Objective::Arlm);
    let m = Model::new(cfg, 4).unwrap();
    let seqs = documents_to_sequences(TEXT, &vocab, 16);
    let all = evaluate_ppl(&m, &seqs).unwrap();
    let mut nll = Vec::new();
    for s in &seqs {
        let r = evaluate_ppl(&m, std::slice::from_ref(s)).unwrap();
        nll.extend(r.per_position.iter().map(|p| p.2));
    }
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    assert!((all.mean_nll - mean).abs() < 1e-12);
}

#[test]
fn overfitting_one_sequence_drives_perplexity_to_one() {
    let text = "the quick brown fox jumps over the lazy dog";
    let vocab = build_vocab(text, 100).unwrap();
    let cfg = ModelConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn_size: 32,
        max_relative_distance: 4,
        vocab_size: vocab.len(),
        max_len: 16,
        objective: Objective::Arlm,
        dropout: 0.0,
        attention_dropout: 0.0,
        ..ModelConfig::default()
    };
    let data = TrainData {
        sequences: documents_to_sequences(text, &vocab, 14),
        seq_len: 12,
        corruption: CorruptionConfig::default(),
    };
    let tc = TrainConfig {
        steps: 150,
        batch_size: 1,
        peak_lr: 1e-2,
        warmup_steps: 10,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut m = Model::new(cfg, 5).unwrap();
    trainer::train(&mut m, &vocab, &data, &tc, &SiftConfig::default(), None).unwrap();
    let r = evaluate_ppl(&m, &documents_to_sequences(text, &vocab, 16)).unwrap();
    assert!(r.perplexity <= 1.1, "{}", r.perplexity);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let (cfg, vocab, data) = setup(Objective::Mlm);
    let mut m = Model::new(cfg, 6).unwrap();
    let shape = m.params.get("lm_head.bias").unwrap().shape().to_vec();
    m.params
        .set("lm_head.bias", Tensor::full(&shape, f64::NAN))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = OutputPaths {
        dir: dir.path().into(),
    };
    let err = trainer::train(
        &mut m,
        &vocab,
        &data,
        &short(3),
        &SiftConfig::default(),
        Some(&out),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::Diverged { step: 1 }));
    let (saved, _) = checkpoint::load(&out.checkpoint()).unwrap();
    assert!(saved.params.get("lm_head.bias").unwrap().data()[0].is_nan());
    assert_eq!(saved.params.get("embed.word"), m.params.get("embed.word"));
}

#[test]
fn ablation_suite_shares_one_batch_stream() {
    let (cfg, vocab, data) = setup(Objective::Mlm);
    let rows =
        trainer::run_ablation_suite(&cfg, &vocab, &data, &short(3), &SiftConfig::default(), None)
            .unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.batch_hash == rows[0].batch_hash));
    let csv = trainer::ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(2).unwrap().starts_with("-EMD,"));
}
