use ebt_autodiff::rng::{seeded, standard_normal};
use ebt_autodiff::{grad, Value};
use ebt_core::model::{init_prediction, Context, DataMode, EbtConfig, EbtModel};
use ebt_core::nn::{
    ebt_causal_attention_efficient, ebt_causal_attention_simplified, AttentionConfig,
    AttentionWeights, SequencePair,
};

fn randn(seed: u64, shape: &[usize], scale: f64) -> Value {
    let n = shape.iter().product();
    Value::constant(standard_normal(&mut seeded(seed), n).into_iter().map(|v| v * scale).collect(), shape)
}

fn weights(seed: u64, d: usize, shared: bool) -> AttentionWeights {
    let w = |k| randn(seed * 10 + k, &[d, d], 0.4);
    AttentionWeights {
        wq: w(1),
        wk: w(2),
        wv: w(3),
        wo: w(4),
        pred: (!shared).then(|| [w(5), w(6), w(7)]),
    }
}

fn max_abs_diff(a: &Value, b: &Value) -> f64 {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn efficient_matches_generalized_mask() {
    let cfg = AttentionConfig::new(8, 2);
    for s in [1usize, 2, 3, 5, 8] {
        for prefix in [0usize, 1] {
            for draw in 0..6u64 {
                let seed = draw + 100 * s as u64;
                let pair = SequencePair::new(
                    randn(seed, &[2, s + prefix, 8], 1.0),
                    randn(seed + 7, &[2, s, 8], 1.0),
                    prefix,
                );
                let w = weights(seed, 8, draw % 2 == 0);
                let a = ebt_causal_attention_efficient(&pair, &w, &cfg);
                let b = ebt_causal_attention_simplified(&pair, &w, &cfg);
                let d = max_abs_diff(&a.observed, &b.observed).max(max_abs_diff(&a.predicted, &b.predicted));
                assert!(d < 1e-10, "S={s} prefix={prefix} draw={draw}: {d}");
            }
        }
    }
}

fn small_model(reference: bool) -> EbtModel {
    let mut cfg = EbtConfig::s1(DataMode::Discrete { vocab_size: 7 }).with_dims(2, 8, 2);
    cfg.reference_attention = reference;
    EbtModel::new(cfg, 3).unwrap()
}

#[test]
fn energy_is_identical_under_both_attention_paths() {
    let (m1, m2) = (small_model(false), small_model(true));
    let ctx = Context::tokens(vec![1, 2, 3, 4, 5, 6, 0, 1, 2, 3], 2, 5);
    let y = init_prediction(2, 5, 7, 9).values;
    let e1 = m1.energy(&ctx, &y, 0).unwrap();
    let e2 = m2.energy(&ctx, &y, 0).unwrap();
    assert_eq!(e1.shape(), &[2, 5]);
    assert!(max_abs_diff(&e1, &e2) < 1e-10);
}

#[test]
fn future_tokens_do_not_leak_into_earlier_energies() {
    let m = small_model(false);
    let s = 6;
    let ids: Vec<usize> = (0..s).map(|i| i % 7).collect();
    let y = init_prediction(1, s, 7, 5).values;
    let base = m.energy(&Context::tokens(ids.clone(), 1, s), &y, 1).unwrap();
    for j in 0..s {
        let mut ids2 = ids.clone();
        ids2[j] = (ids2[j] + 3) % 7;
        let mut yd = y.to_vec();
        for v in &mut yd[j * 7..(j + 1) * 7] {
            *v += 1.5;
        }
        let e = m.energy(&Context::tokens(ids2, 1, s), &Value::constant(yd, y.shape()), 1).unwrap();
        for t in 0..j {
            assert!((e.data()[t] - base.data()[t]).abs() < 1e-12, "position {t} changed after edit at {j}");
        }
        // Gradient of earlier energies with respect to the edited prediction is zero.
        let yv = y.detach_requiring_grad();
        let early = m.energy(&Context::tokens(ids.clone(), 1, s), &yv, 1).unwrap().slice(1, 0, j).sum();
        if j > 0 {
            let g = grad(&early, &[yv], false).unwrap().remove(0);
            assert!(g.data()[j * 7..].iter().all(|v| *v == 0.0));
        }
    }
}
