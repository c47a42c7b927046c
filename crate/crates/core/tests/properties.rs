use dalm::attention::{scores_efficient, scores_naive, AttentionParams, ScoreTerms};
use dalm::data::{build_vocab, corrupt, is_special, Branch, CorruptionConfig, Vocab, CLS, SEP};
use dalm::relpos::{delta, DeltaMatrix, RelPosTable};
use dalm::tape::Tape;
use dalm::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Branch-by-branch restatement of the relative-distance bucket.
fn delta_oracle(i: usize, j: usize, k: usize) -> usize {
    let diff = i as i64 - j as i64;
    let k = k as i64;
    if diff <= -k {
        0
    } else if diff >= k {
        (2 * k - 1) as usize
    } else {
        (diff + k) as usize
    }
}

proptest! {
    #[test]
    fn delta_matches_oracle_and_stays_in_range(i in 0usize..200, j in 0usize..200, k in 1usize..40) {
        let d = delta(i, j, k).unwrap();
        prop_assert_eq!(d, delta_oracle(i, j, k));
        prop_assert!(d < 2 * k);
    }

    #[test]
    fn delta_matrix_is_reflected(n in 1usize..30, k in 1usize..10) {
        let m = DeltaMatrix::new(n, k).unwrap();
        for i in 0..n {
            for j in 0..n {
                // δ(i,j) + δ(j,i) = 2k when both are unclamped.
                let (a, b) = (m.get(i, j), m.get(j, i));
                if i.abs_diff(j) < k {
                    prop_assert_eq!(a + b, 2 * k);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12), mask in prop::collection::vec(any::<bool>(), 12)) {
        let mut data = vals.clone();
        for (r, chunk) in mask.chunks(4).enumerate() {
            // Keep one live entry per row.
            for (c, &m) in chunk.iter().enumerate().skip(1) {
                if m {
                    data[r * 4 + c] = -1e30;
                }
            }
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], data.clone()).unwrap());
        let s = t.softmax_rows(x).unwrap();
        for r in 0..3 {
            let row = t.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..4 {
                if data[r * 4 + c] <= -1e29 {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn corruption_invariants(len in 3usize..80, seed in any::<u64>(), rate in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<u32> = vec![CLS];
        x.extend((0..len).map(|i| 5 + (i as u32 * 7) % 50));
        x.push(SEP);
        let cfg = CorruptionConfig { mask_rate: rate, ..CorruptionConfig::default() };
        let c = corrupt(&x, 60, &mut rng, &cfg).unwrap();
        prop_assert!(!c.positions.is_empty());
        prop_assert_eq!(c.positions.len(), c.branches.len());
        let mut run = 0;
        let mut prev = None;
        for (&p, &b) in c.positions.iter().zip(&c.branches) {
            prop_assert!(!is_special(x[p]));
            run = if prev == Some(p - 1) { run + 1 } else { 1 };
            prop_assert!(run <= cfg.span_max);
            prev = Some(p);
            match b {
                Branch::Mask => prop_assert_eq!(c.tokens[p], dalm::data::MASK),
                Branch::Keep => prop_assert_eq!(c.tokens[p], x[p]),
                Branch::Random => prop_assert!((5..60).contains(&c.tokens[p])),
            }
        }
        for i in 0..x.len() {
            if !c.positions.contains(&i) {
                prop_assert_eq!(c.tokens[i], x[i]);
            }
        }
    }

    #[test]
    fn kernels_agree(n in 1usize..20, k in 1usize..6, heads in 1usize..3, seed in any::<u64>(), share in any::<bool>(), c2p in any::<bool>(), p2c in any::<bool>()) {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let d = 4 * heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::random(d, heads, ScoreTerms { c2p, p2c }, share, 0.7, &mut rng);
        let h = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let table = RelPosTable::new(k, Tensor::new(vec![2 * k, d], (0..2 * k * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()).unwrap();
        let dm = DeltaMatrix::new(n, k).unwrap();
        let a = scores_naive(&h, &p, &table, &dm).unwrap();
        let b = scores_efficient(&h, &p, &table, &dm).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn vocab_file_round_trip(words in prop::collection::vec("[a-z]{1,6}", 1..40)) {
        let text = words.join(" ");
        let v = build_vocab(&text, 1000).unwrap();
        let back = Vocab::from_file_str(&v.to_file_string()).unwrap();
        prop_assert_eq!(&v, &back);
        for w in &words {
            prop_assert_eq!(back.token(back.id(w)), Some(w.as_str()));
        }
    }
}

#[test]
fn corruption_statistics_over_a_large_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = CorruptionConfig::default();
    let (mut maskable, mut selected) = (0usize, 0usize);
    let mut branches = [0usize; 3];
    while maskable < 100_000 {
        let mut x = vec![CLS];
        x.extend((0..126).map(|i| 5 + (i % 90) as u32));
        x.push(SEP);
        let c = corrupt(&x, 100, &mut rng, &cfg).unwrap();
        maskable += 126;
        selected += c.positions.len();
        for b in c.branches {
            branches[b as usize] += 1;
        }
    }
    let rate = selected as f64 / maskable as f64;
    assert!((rate - 0.15).abs() <= 0.01, "{rate}");
    let total = branches.iter().sum::<usize>() as f64;
    let split: Vec<f64> = branches.iter().map(|&b| b as f64 / total).collect();
    assert!(
        (split[0] - 0.8).abs() <= 0.02
            && (split[1] - 0.1).abs() <= 0.02
            && (split[2] - 0.1).abs() <= 0.02,
        "{split:?}"
    );
}
