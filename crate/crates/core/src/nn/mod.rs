//! Transformer building blocks: RMS normalization, gated MLP, rotary
//! position encoding, and the attention variants used by the models.

mod attention;
mod block;

pub use attention::{
    bidirectional_attention, ebt_causal_attention_efficient, ebt_causal_attention_simplified,
    merge_heads, split_heads, standard_causal_attention, AttentionConfig, AttentionWeights,
    EbtMasks, SequencePair,
};
pub use block::{Block, BlockKind};

use ebt_autodiff::Value;

pub const RMS_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x^2) + eps) * gain` over the last axis.
pub fn rms_normalize(x: &Value, gain: &Value) -> Value {
    let last = x.rank() - 1;
    let ms = x.square().mean_axis(last, true).add_scalar(RMS_EPS);
    x.div(&ms.sqrt()).mul(gain)
}

/// SwiGLU feed-forward: `(silu(x W_gate) * (x W_up)) W_down`.
pub fn gated_mlp(x: &Value, w_gate: &Value, w_up: &Value, w_down: &Value) -> Value {
    x.matmul(w_gate).silu().mul(&x.matmul(w_up)).matmul(w_down)
}

/// Rotary encoding of `x` (`[..., T, d]`, `d` even) with one position per
/// row of the `T` axis. Rotate-half convention: feature `i` pairs with
/// feature `i + d/2`, rotated by `pos * base^(-2i/d)`.
pub fn rotary_encode(x: &Value, positions: &[f64], base: f64) -> Value {
    let shape = x.shape();
    let nd = shape.len();
    let (t, d) = (shape[nd - 2], shape[nd - 1]);
    assert_eq!(positions.len(), t, "rotary: {} positions for {t} rows", positions.len());
    assert!(d % 2 == 0, "rotary: feature dimension {d} must be even");
    let half = d / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for &p in positions {
        for i in 0..half {
            let theta = p * base.powf(-2.0 * i as f64 / d as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    let cos = Value::constant(cos, &[t, half]);
    let sin = Value::constant(sin, &[t, half]);
    let x1 = x.slice(nd - 1, 0, half);
    let x2 = x.slice(nd - 1, half, d);
    let r1 = x1.mul(&cos).sub(&x2.mul(&sin));
    let r2 = x2.mul(&cos).add(&x1.mul(&sin));
    Value::concat(&[r1, r2], nd - 1)
}
