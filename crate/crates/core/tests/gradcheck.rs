//! Central finite differences against the tape, op by op and for the whole
//! model.

use std::sync::Arc;

use dalm::config::ModelConfig;
use dalm::model::{nll_sum_on, Binder, ForwardOptions, Model, Task};
use dalm::tape::{Tape, Var};
use dalm::tensor::{IndexMatrix, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

fn close(a: f64, n: f64) -> bool {
    let diff = (a - n).abs();
    diff <= 1e-5 || diff <= 1e-3 * a.abs().max(n.abs())
}

/// Builds `Σ R ⊙ f(inputs)` and compares every input gradient with central
/// differences.
fn check<F>(name: &str, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let weights = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        randn(&mut rng, t.shape(out))
    };
    let eval = |xs: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let out = f(&mut t, &vars);
        let r = t.constant(weights.clone());
        let p = t.mul(out, r).unwrap();
        let loss = t.sum(p);
        t.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| {
                t.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.value(v).len()])
            })
            .collect();
        (t.value(loss).data()[0], grads)
    };
    let (_, analytic) = eval(&inputs);
    for (which, x) in inputs.iter().enumerate() {
        for e in 0..x.len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[which].data_mut()[e] -= H;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * H);
            let a = analytic[which][e];
            assert!(
                close(a, numeric),
                "{name}: input {which} element {e}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_and_matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let c = randn(&mut rng, &[3, 4]);
    let bt = randn(&mut rng, &[5, 4]);
    let row = randn(&mut rng, &[4]);
    check("matmul", vec![a.clone(), b], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check("matmul_nt", vec![a.clone(), bt], |t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
    check("add", vec![a.clone(), c.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check("sub", vec![a.clone(), c.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    check("mul", vec![a.clone(), c.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check("mul same operand", vec![a.clone()], |t, v| {
        t.mul(v[0], v[0]).unwrap()
    });
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -2.5));
    check("add_row", vec![a.clone(), row.clone()], |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check("mul_row", vec![a.clone(), row.clone()], |t, v| {
        t.mul_row(v[0], v[1]).unwrap()
    });
    check("gelu", vec![a.clone()], |t, v| t.gelu(v[0]));
    check("exp", vec![a.clone()], |t, v| t.exp(v[0]));
    check("row_sum", vec![a.clone()], |t, v| t.row_sum(v[0]).unwrap());
    check("reshape", vec![a.clone()], |t, v| {
        t.reshape(v[0], vec![2, 6]).unwrap()
    });
    check("sum", vec![a], |t, v| t.sum(v[0]));
}

#[test]
fn normalisation_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[3, 5]);
    let g = randn(&mut rng, &[5]);
    let b = randn(&mut rng, &[5]);
    check("softmax_rows", vec![x.clone()], |t, v| {
        t.softmax_rows(v[0]).unwrap()
    });
    check("log_softmax_rows", vec![x.clone()], |t, v| {
        t.log_softmax_rows(v[0])
    });
    check("layer_norm", vec![x.clone(), g, b], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-12).unwrap()
    });
    // Masked entries must neither receive gradient nor disturb the rest.
    let mut masked = x.clone();
    masked.data_mut()[1] = -1e30;
    let sm = {
        let mut t = Tape::new();
        let v = t.param(masked.clone());
        let s = t.softmax_rows(v).unwrap();
        let p = t.pick(s, vec![(0, 0), (0, 2)]).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        t.grad(v).unwrap()[1]
    };
    assert_eq!(sm, 0.0);
}

#[test]
fn indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = randn(&mut rng, &[4, 3]);
    check("gather_rows", vec![table.clone()], |t, v| {
        t.gather_rows(v[0], vec![2, 0, 2, 3]).unwrap()
    });
    let x = randn(&mut rng, &[3, 6]);
    check("slice_cols", vec![x.clone()], |t, v| {
        t.slice_cols(v[0], 2, 3).unwrap()
    });
    let y = randn(&mut rng, &[3, 2]);
    check("concat_cols", vec![x.clone(), y], |t, v| {
        t.concat_cols(&[v[0], v[1], v[0]]).unwrap()
    });
    check("pick", vec![x.clone()], |t, v| {
        t.pick(v[0], vec![(0, 1), (2, 5), (0, 1)]).unwrap()
    });

    // 3×3 index into a 3×4 source (direct) and its transposed reading.
    let idx = Arc::new(IndexMatrix::from_fn(3, 3, |i, j| (i + 2 * j) % 4));
    let src = randn(&mut rng, &[3, 4]);
    let i2 = Arc::clone(&idx);
    check("gather_cols direct", vec![src.clone()], move |t, v| {
        t.gather_cols(v[0], Arc::clone(&i2), None, false).unwrap()
    });
    let i3 = Arc::clone(&idx);
    check("gather_cols transposed", vec![src.clone()], move |t, v| {
        t.gather_cols(v[0], Arc::clone(&i3), None, true).unwrap()
    });
    // Selected query rows: a 2-row source reading rows 2 and 0 of the index.
    let src2 = randn(&mut rng, &[2, 4]);
    let i4 = Arc::clone(&idx);
    check("gather_cols select", vec![src2], move |t, v| {
        t.gather_cols(v[0], Arc::clone(&i4), Some(Arc::from(vec![2, 0])), false)
            .unwrap()
    });
    let i5 = Arc::clone(&idx);
    check("gather_cols select transposed", vec![src], move |t, v| {
        t.gather_cols(v[0], Arc::clone(&i5), Some(Arc::from(vec![1, 1])), true)
            .unwrap()
    });
}

fn toy(emd_shared: bool, share_projection: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn_size: 16,
        max_relative_distance: 4,
        vocab_size: 11,
        max_len: 8,
        emd_layers: 2,
        emd_shared,
        share_projection,
        dropout: 0.0,
        attention_dropout: 0.0,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Every parameter of the model against central differences.
fn model_gradcheck(cfg: ModelConfig, task: Task, seed: u64) {
    let model = Model::new(cfg, seed).unwrap();
    let loss_of = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let mut b = Binder::new(&m.params, false);
        let f = m
            .forward_on(&mut tape, &mut b, &task, &mut ForwardOptions::default())
            .unwrap();
        let l = nll_sum_on(&mut tape, f.logits, &f.targets).unwrap();
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let mut b = Binder::new(&model.params, true);
    let f = model
        .forward_on(&mut tape, &mut b, &task, &mut ForwardOptions::default())
        .unwrap();
    let l = nll_sum_on(&mut tape, f.logits, &f.targets).unwrap();
    tape.backward(l).unwrap();
    let grads = b.grads(&tape);
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut probe = model.clone();
    let mut checked = 0;
    for name in &names {
        let g = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; model.params.get(name).unwrap().len()]);
        for e in 0..g.len() {
            let orig = model.params.get(name).unwrap().data()[e];
            probe.params.get_mut(name).unwrap().data_mut()[e] = orig + H;
            let up = loss_of(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[e] = orig - H;
            let down = loss_of(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * H);
            assert!(
                close(g[e], numeric),
                "{name}[{e}]: analytic {} numeric {numeric}",
                g[e]
            );
            checked += 1;
        }
    }
    assert_eq!(checked, model.params.count());
}

#[test]
fn model_gradients_mlm_shared_decoder() {
    let tokens = [2u32, 7, 4, 9, 4, 3];
    let original = [2u32, 7, 5, 9, 10, 3];
    model_gradcheck(
        toy(true, false),
        Task::Mlm {
            tokens: &tokens,
            original: &original,
            masked: &[2, 4],
        },
        11,
    );
}

#[test]
fn model_gradients_arlm_unshared_decoder_shared_projection() {
    let tokens = [2u32, 6, 8, 5, 10, 3];
    model_gradcheck(toy(false, true), Task::Arlm { tokens: &tokens }, 12);
}

#[test]
fn model_gradients_without_emd() {
    let mut cfg = toy(true, false);
    cfg.ablations.emd = false;
    cfg.abs_pos_at_input = true;
    let tokens = [2u32, 6, 4, 5, 4, 3];
    let original = [2u32, 6, 7, 5, 9, 3];
    model_gradcheck(
        cfg,
        Task::Mlm {
            tokens: &tokens,
            original: &original,
            masked: &[2, 4],
        },
        13,
    );
}
