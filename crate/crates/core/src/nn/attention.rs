use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ebt_autodiff::Value;
use serde::{Deserialize, Serialize};

use super::rotary_encode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub rotary_base: f64,
    pub causal: bool,
    pub use_rotary: bool,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && embed_dim % heads == 0,
            "embedding dimension {embed_dim} is not divisible by {heads} heads"
        );
        Self {
            heads,
            head_dim: embed_dim / heads,
            rotary_base: 10_000.0,
            causal: true,
            use_rotary: true,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    fn rope(&self, x: &Value, positions: &[f64]) -> Value {
        if self.use_rotary {
            rotary_encode(x, positions, self.rotary_base)
        } else {
            x.clone()
        }
    }
}

/// Projection weights for one attention layer, each `[D, D]`. `pred` holds
/// separate query/key/value projections for the prediction stream when the
/// streams do not share weights.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Value,
    pub wk: Value,
    pub wv: Value,
    pub wo: Value,
    pub pred: Option<[Value; 3]>,
}

/// Observed-state and prediction representations for a causal EBT pass.
///
/// `observed` is `[B, prefix + S, D]`: `prefix` leading slots (the step
/// embedding) followed by the `S` context elements. `predicted` is
/// `[B, S, D]`; row `t` is the candidate for the element after context
/// element `t`.
#[derive(Clone, Debug)]
pub struct SequencePair {
    pub observed: Value,
    pub predicted: Value,
    pub prefix: usize,
}

impl SequencePair {
    pub fn new(observed: Value, predicted: Value, prefix: usize) -> Self {
        let (so, sp) = (observed.shape(), predicted.shape());
        assert!(
            so.len() == 3 && sp.len() == 3 && so[0] == sp[0] && so[2] == sp[2] && so[1] == sp[1] + prefix,
            "sequence pair: observed {so:?} and predicted {sp:?} disagree (prefix {prefix})"
        );
        Self { observed, predicted, prefix }
    }

    pub fn len(&self) -> usize {
        self.predicted.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observed_positions(&self) -> Vec<f64> {
        (0..self.observed.shape()[1]).map(|i| i as f64).collect()
    }

    /// Prediction `t` sits at the position of the element it predicts.
    pub fn predicted_positions(&self) -> Vec<f64> {
        (0..self.len()).map(|t| (t + self.prefix + 1) as f64).collect()
    }
}

/// `[B, T, D] -> [B, H, T, D/H]`.
pub fn split_heads(x: &Value, heads: usize) -> Value {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, t, heads, d / heads]).permute(&[0, 2, 1, 3])
}

/// `[B, H, T, d] -> [B, T, H*d]`.
pub fn merge_heads(x: &Value) -> Value {
    let s = x.shape();
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3]).reshape(&[b, t, h * d])
}

/// Constant masks for a causal EBT pass with `s` predictions over `l`
/// observed slots, the first `prefix` of which precede the sequence.
pub struct EbtMasks {
    /// `[L, L]` additive bias: `-inf` above the diagonal.
    pub observed_bias: Value,
    /// `[S, L+1]` with a single 1 per row at column `t + prefix + 1`.
    pub superdiag: Value,
    /// `1 - superdiag`.
    pub off_superdiag: Value,
    /// `[S, L+1]` additive bias: `-inf` right of the superdiagonal.
    pub predicted_bias: Value,
    /// `[L+S, L+S]` additive bias of the generalized causal mask.
    pub full_bias: Value,
}

impl EbtMasks {
    fn build(s: usize, l: usize, prefix: usize) -> Self {
        let ninf = f64::NEG_INFINITY;
        let mut observed = vec![0.0; l * l];
        for i in 0..l {
            for j in i + 1..l {
                observed[i * l + j] = ninf;
            }
        }
        let w = l + 1;
        let mut superdiag = vec![0.0; s * w];
        let mut predicted = vec![0.0; s * w];
        for t in 0..s {
            let diag = t + prefix + 1;
            superdiag[t * w + diag] = 1.0;
            for j in diag + 1..w {
                predicted[t * w + j] = ninf;
            }
        }
        let off: Vec<f64> = superdiag.iter().map(|m| 1.0 - m).collect();
        let n = l + s;
        let mut full = vec![ninf; n * n];
        for i in 0..l {
            for j in 0..=i {
                full[i * n + j] = 0.0;
            }
        }
        for t in 0..s {
            let row = l + t;
            for j in 0..=(t + prefix).min(l - 1) {
                full[row * n + j] = 0.0;
            }
            full[row * n + row] = 0.0;
        }
        Self {
            observed_bias: Value::constant(observed, &[l, l]),
            superdiag: Value::constant(superdiag, &[s, w]),
            off_superdiag: Value::constant(off, &[s, w]),
            predicted_bias: Value::constant(predicted, &[s, w]),
            full_bias: Value::constant(full, &[n, n]),
        }
    }

    /// Cached per `(s, l, prefix)`.
    pub fn get(s: usize, l: usize, prefix: usize) -> Arc<EbtMasks> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize), Arc<EbtMasks>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("mask cache poisoned");
        guard
            .entry((s, l, prefix))
            .or_insert_with(|| Arc::new(EbtMasks::build(s, l, prefix)))
            .clone()
    }
}

fn attend(q: &Value, k: &Value, v: &Value, bias: Option<&Value>, scale: f64) -> Value {
    let mut scores = q.matmul_t(k, false, true).scale(scale);
    if let Some(b) = bias {
        scores = scores.add(b);
    }
    scores.softmax().matmul(v)
}

fn causal_bias(t: usize) -> Value {
    EbtMasks::get(0, t, 0).observed_bias.clone()
}

/// Multi-head causal self-attention over `x: [B, S, D]`.
pub fn standard_causal_attention(x: &Value, w: &AttentionWeights, cfg: &AttentionConfig) -> Value {
    let t = x.shape()[1];
    let positions: Vec<f64> = (0..t).map(|i| i as f64).collect();
    let q = cfg.rope(&split_heads(&x.matmul(&w.wq), cfg.heads), &positions);
    let k = cfg.rope(&split_heads(&x.matmul(&w.wk), cfg.heads), &positions);
    let v = split_heads(&x.matmul(&w.wv), cfg.heads);
    let bias = causal_bias(t);
    merge_heads(&attend(&q, &k, &v, Some(&bias), cfg.scale())).matmul(&w.wo)
}

/// Multi-head all-to-all attention over `x: [B, S, D]` at the given positions.
pub fn bidirectional_attention(
    x: &Value,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    positions: &[f64],
) -> Value {
    let q = cfg.rope(&split_heads(&x.matmul(&w.wq), cfg.heads), positions);
    let k = cfg.rope(&split_heads(&x.matmul(&w.wk), cfg.heads), positions);
    let v = split_heads(&x.matmul(&w.wv), cfg.heads);
    merge_heads(&attend(&q, &k, &v, None, cfg.scale())).matmul(&w.wo)
}

struct Projected {
    q_o: Value,
    k_o: Value,
    v_o: Value,
    q_p: Value,
    k_p: Value,
    v_p: Value,
}

fn project(pair: &SequencePair, w: &AttentionWeights, cfg: &AttentionConfig) -> Projected {
    let pos_o = pair.observed_positions();
    let pos_p = pair.predicted_positions();
    let heads = |x: &Value, m: &Value| split_heads(&x.matmul(m), cfg.heads);
    let (wq_p, wk_p, wv_p) = match &w.pred {
        Some([q, k, v]) => (q, k, v),
        None => (&w.wq, &w.wk, &w.wv),
    };
    Projected {
        q_o: cfg.rope(&heads(&pair.observed, &w.wq), &pos_o),
        k_o: cfg.rope(&heads(&pair.observed, &w.wk), &pos_o),
        v_o: heads(&pair.observed, &w.wv),
        q_p: cfg.rope(&heads(&pair.predicted, wq_p), &pos_p),
        k_p: cfg.rope(&heads(&pair.predicted, wk_p), &pos_p),
        v_p: heads(&pair.predicted, wv_p),
    }
}

/// Causal EBT attention built from an `S x (L+1)` score matrix per head.
///
/// Observed states attend causally among themselves. Prediction `t` attends
/// to observed slots `0..=t+prefix` and to itself, whose score is placed on
/// the superdiagonal with 0/1 masks, so no prediction ever sees another.
pub fn ebt_causal_attention_efficient(
    pair: &SequencePair,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
) -> SequencePair {
    let p = project(pair, w, cfg);
    let (l, s) = (pair.observed.shape()[1], pair.len());
    let masks = EbtMasks::get(s, l, pair.prefix);
    let scale = cfg.scale();

    let z_o = attend(&p.q_o, &p.k_o, &p.v_o, Some(&masks.observed_bias), scale);

    let raw = p.q_p.matmul_t(&p.k_o, false, true).scale(scale);
    let mut pad_shape = raw.shape().to_vec();
    pad_shape[3] = 1;
    let raw = Value::concat(&[raw, Value::zeros(&pad_shape)], 3);
    let self_scores = p.q_p.mul(&p.k_p).sum_axis(3, true).scale(scale);
    let scores = raw
        .mul(&masks.off_superdiag)
        .add(&self_scores.mul(&masks.superdiag))
        .add(&masks.predicted_bias);
    let probs = scores.softmax();
    let self_weight = probs.mul(&masks.superdiag).sum_axis(3, true);
    let observed_weights = probs.mul(&masks.off_superdiag).slice(3, 0, l);
    let z_p = observed_weights.matmul(&p.v_o).add(&self_weight.mul(&p.v_p));

    SequencePair {
        observed: merge_heads(&z_o).matmul(&w.wo),
        predicted: merge_heads(&z_p).matmul(&w.wo),
        prefix: pair.prefix,
    }
}

/// Reference implementation: one `(L+S) x (L+S)` attention over the
/// concatenated streams with a generalized causal mask.
pub fn ebt_causal_attention_simplified(
    pair: &SequencePair,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
) -> SequencePair {
    let p = project(pair, w, cfg);
    let (l, s) = (pair.observed.shape()[1], pair.len());
    let masks = EbtMasks::get(s, l, pair.prefix);
    let q = Value::concat(&[p.q_o, p.q_p], 2);
    let k = Value::concat(&[p.k_o, p.k_p], 2);
    let v = Value::concat(&[p.v_o, p.v_p], 2);
    let out = attend(&q, &k, &v, Some(&masks.full_bias), cfg.scale());
    SequencePair {
        observed: merge_heads(&out.slice(2, 0, l)).matmul(&w.wo),
        predicted: merge_heads(&out.slice(2, l, l + s)).matmul(&w.wo),
        prefix: pair.prefix,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ebt_autodiff::rng::{seeded, standard_normal, EngineRng};

    fn weights(rng: &mut EngineRng, d: usize) -> AttentionWeights {
        let mut m = || Value::constant(standard_normal(rng, d * d).iter().map(|v| v / (d as f64).sqrt()).collect(), &[d, d]);
        AttentionWeights { wq: m(), wk: m(), wv: m(), wo: m(), pred: None }
    }

    #[test]
    fn masks_have_expected_counts() {
        let m = EbtMasks::build(4, 5, 1);
        for t in 0..4 {
            let row = &m.predicted_bias.data()[t * 6..(t + 1) * 6];
            let open = row.iter().filter(|v| v.is_finite()).count();
            // Observed 0..=t+1 plus the superdiagonal slot.
            assert_eq!(open, t + 3);
            assert_eq!(m.superdiag.data()[t * 6 + t + 2], 1.0);
        }
        // Generalized mask: prediction row t has t + prefix + 1 observed + itself.
        for t in 0..4 {
            let row = &m.full_bias.data()[(5 + t) * 9..(6 + t) * 9];
            assert_eq!(row.iter().filter(|v| v.is_finite()).count(), t + 3);
        }
    }

    #[test]
    fn single_token_causal_attention_is_value_projection() {
        let mut rng = seeded(2);
        let w = weights(&mut rng, 8);
        let cfg = AttentionConfig::new(8, 2);
        let x = Value::constant(standard_normal(&mut rng, 8), &[1, 1, 8]);
        let out = standard_causal_attention(&x, &w, &cfg);
        let expect = x.matmul(&w.wv).matmul(&w.wo);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
