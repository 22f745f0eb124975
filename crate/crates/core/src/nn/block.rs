use ebt_autodiff::rng::EngineRng;
use ebt_autodiff::Value;

use super::attention::{
    bidirectional_attention, ebt_causal_attention_efficient, ebt_causal_attention_simplified,
    standard_causal_attention, AttentionConfig, AttentionWeights, SequencePair,
};
use super::{gated_mlp, rms_normalize};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Causal EBT attention via the superdiagonal construction.
    EbtEfficient,
    /// Causal EBT attention via the full generalized mask.
    EbtSimplified,
}

/// Pre-norm transformer block: attention then SwiGLU, each residual.
#[derive(Clone, Debug)]
pub struct Block {
    norm_attn: ParamId,
    norm_mlp: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    pred_qkv: Option<[ParamId; 3]>,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

impl Block {
    pub fn register(
        ps: &mut ParamStore,
        prefix: &str,
        dim: usize,
        ffn_dim: usize,
        shared_qkv: bool,
        rng: &mut EngineRng,
    ) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        let norm_attn = ps.gain(n("norm_attn"), dim);
        let wq = ps.xavier(n("attn.wq"), dim, dim, rng);
        let wk = ps.xavier(n("attn.wk"), dim, dim, rng);
        let wv = ps.xavier(n("attn.wv"), dim, dim, rng);
        let wo = ps.xavier(n("attn.wo"), dim, dim, rng);
        let pred_qkv = (!shared_qkv).then(|| {
            [
                ps.xavier(n("attn.pred_wq"), dim, dim, rng),
                ps.xavier(n("attn.pred_wk"), dim, dim, rng),
                ps.xavier(n("attn.pred_wv"), dim, dim, rng),
            ]
        });
        let norm_mlp = ps.gain(n("norm_mlp"), dim);
        let w_gate = ps.xavier(n("mlp.w_gate"), dim, ffn_dim, rng);
        let w_up = ps.xavier(n("mlp.w_up"), dim, ffn_dim, rng);
        let w_down = ps.xavier(n("mlp.w_down"), ffn_dim, dim, rng);
        Self { norm_attn, norm_mlp, wq, wk, wv, wo, pred_qkv, w_gate, w_up, w_down }
    }

    /// Parameter count for a block of width `dim` with a `ffn_dim` hidden layer.
    pub fn param_count(dim: usize, ffn_dim: usize, shared_qkv: bool) -> usize {
        let attn = if shared_qkv { 4 } else { 7 } * dim * dim;
        attn + 3 * dim * ffn_dim + 2 * dim
    }

    pub fn attention_weights(&self, ps: &ParamStore) -> AttentionWeights {
        AttentionWeights {
            wq: ps.get(self.wq).clone(),
            wk: ps.get(self.wk).clone(),
            wv: ps.get(self.wv).clone(),
            wo: ps.get(self.wo).clone(),
            pred: self
                .pred_qkv
                .map(|[q, k, v]| [ps.get(q).clone(), ps.get(k).clone(), ps.get(v).clone()]),
        }
    }

    fn mlp(&self, ps: &ParamStore, x: &Value) -> Value {
        let h = rms_normalize(x, ps.get(self.norm_mlp));
        x.add(&gated_mlp(&h, ps.get(self.w_gate), ps.get(self.w_up), ps.get(self.w_down)))
    }

    /// Causal EBT block over both streams.
    pub fn forward_ebt(
        &self,
        ps: &ParamStore,
        pair: &SequencePair,
        cfg: &AttentionConfig,
        kind: BlockKind,
    ) -> SequencePair {
        let g = ps.get(self.norm_attn);
        let normed = SequencePair {
            observed: rms_normalize(&pair.observed, g),
            predicted: rms_normalize(&pair.predicted, g),
            prefix: pair.prefix,
        };
        let w = self.attention_weights(ps);
        let attn = match kind {
            BlockKind::EbtEfficient => ebt_causal_attention_efficient(&normed, &w, cfg),
            BlockKind::EbtSimplified => ebt_causal_attention_simplified(&normed, &w, cfg),
        };
        // Norm and MLP are per token, so both streams share one pass.
        let l = pair.observed.shape()[1];
        let x = Value::concat(&[pair.observed.add(&attn.observed), pair.predicted.add(&attn.predicted)], 1);
        let x = self.mlp(ps, &x);
        let total = x.shape()[1];
        SequencePair {
            observed: x.slice(1, 0, l),
            predicted: x.slice(1, l, total),
            prefix: pair.prefix,
        }
    }

    /// Standard causal block over `[B, S, D]`.
    pub fn forward_causal(&self, ps: &ParamStore, x: &Value, cfg: &AttentionConfig) -> Value {
        let h = rms_normalize(x, ps.get(self.norm_attn));
        let x = x.add(&standard_causal_attention(&h, &self.attention_weights(ps), cfg));
        self.mlp(ps, &x)
    }

    /// All-to-all block over `[B, S, D]`.
    pub fn forward_bidirectional(
        &self,
        ps: &ParamStore,
        x: &Value,
        cfg: &AttentionConfig,
        positions: &[f64],
    ) -> Value {
        let h = rms_normalize(x, ps.get(self.norm_attn));
        let x = x.add(&bidirectional_attention(&h, &self.attention_weights(ps), cfg, positions));
        self.mlp(ps, &x)
    }
}
