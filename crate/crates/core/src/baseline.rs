//! Feed-forward decoder-only transformer: same blocks, direct next-symbol
//! logits through the tied embedding, one forward pass per prediction.

use ebt_autodiff::rng::seeded;
use ebt_autodiff::{grad, Value};
use serde::{Deserialize, Serialize};

use crate::error::{EbtError, Result};
use crate::model::Context;
use crate::nn::{rms_normalize, AttentionConfig, Block};
use crate::params::{ParamId, ParamStore};
use crate::tasks::metrics::cross_entropy;
use crate::tasks::{Batch, Target};
use crate::train::{clip_global_norm, lr_at, AdamW, StepRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub rotary_base: f64,
}

impl BaselineConfig {
    pub fn new(vocab_size: usize, layers: usize, embed_dim: usize, heads: usize) -> Self {
        Self { vocab_size, layers, embed_dim, heads, ffn_multiplier: 1, rotary_base: 10_000.0 }
    }

    /// `V*D + L*(4D^2 + 3mD^2 + 2D) + D`.
    pub fn param_count(&self) -> usize {
        let (v, d, l, m) = (self.vocab_size, self.embed_dim, self.layers, self.ffn_multiplier);
        v * d + l * Block::param_count(d, m * d, true) + d
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.layers == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(EbtError::config("baseline needs V, layers, heads > 0 and heads dividing embed_dim"));
        }
        if (self.embed_dim / self.heads) % 2 != 0 {
            return Err(EbtError::config("rotary encoding needs an even head dimension"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub cfg: BaselineConfig,
    pub params: ParamStore,
    embed: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
}

impl BaselineModel {
    pub fn new(cfg: BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut ps = ParamStore::new();
        let d = cfg.embed_dim;
        let embed = ps.xavier("embed.tokens", cfg.vocab_size, d, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block::register(&mut ps, &format!("blocks.{i}"), d, d * cfg.ffn_multiplier, true, &mut rng))
            .collect();
        let final_norm = ps.gain("final_norm", d);
        Ok(Self { cfg, params: ps, embed, blocks, final_norm })
    }

    pub fn non_embedding_params(&self) -> usize {
        self.params.count() - self.cfg.vocab_size * self.cfg.embed_dim
    }

    /// `[B, S, V]` next-symbol logits.
    pub fn logits(&self, ctx: &Context) -> Result<Value> {
        let Context::Tokens { ids, batch, len } = ctx else {
            return Err(EbtError::contract("the baseline takes token contexts"));
        };
        if let Some(bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(EbtError::contract(format!("token id {bad} >= vocab size {}", self.cfg.vocab_size)));
        }
        let d = self.cfg.embed_dim;
        let table = self.params.get(self.embed);
        let mut x = table.take_rows(ids.clone()).reshape(&[*batch, *len, d]);
        let mut attn = AttentionConfig::new(d, self.cfg.heads);
        attn.rotary_base = self.cfg.rotary_base;
        for b in &self.blocks {
            x = b.forward_causal(&self.params, &x, &attn);
        }
        let h = rms_normalize(&x, self.params.get(self.final_norm));
        Ok(h.matmul_t(table, false, true))
    }
}

pub struct BaselineTrainer {
    pub model: BaselineModel,
    pub cfg: TrainConfig,
    pub step: usize,
    opt: AdamW,
    nfe_cum: u64,
    flops_cum: u128,
}

impl BaselineTrainer {
    pub fn new(model: BaselineModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = model.params.iter().map(|p| p.value.numel()).collect();
        let opt = AdamW::new(&cfg, &sizes);
        Ok(Self { model, cfg, step: 0, opt, nfe_cum: 0, flops_cum: 0 })
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let Target::Tokens(t) = &batch.target else {
            return Err(EbtError::contract("the baseline trains on token targets"));
        };
        let loss = cross_entropy(&self.model.logits(&batch.context)?, t, Some(&batch.weights));
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(EbtError::Instability { step: self.step, detail: format!("loss {loss_value}") });
        }
        let params = self.model.params.values();
        let mut grads: Vec<Vec<f64>> = grad(&loss, &params, false)?.into_iter().map(|g| g.to_vec()).collect();
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(EbtError::Instability { step: self.step, detail: format!("gradient norm {grad_norm}") });
        }
        let lr = lr_at(self.step, &self.cfg);
        let lrs = vec![lr; params.len()];
        let decay: Vec<bool> = self.model.params.iter().map(|p| !p.no_decay && p.value.rank() >= 2).collect();
        let data: Vec<&[f64]> = params.iter().map(|p| p.data()).collect();
        for (i, d) in self.opt.step(&data, &grads, &lrs, &decay).into_iter().enumerate() {
            self.model.params.set(i, d);
        }
        let tokens = (batch.size() * batch.len()) as u128;
        self.nfe_cum += 1;
        self.flops_cum += crate::flops::flops_ff_per_token(self.model.non_embedding_params() as u64)? * tokens;
        let record = StepRecord {
            step: self.step,
            loss: loss_value,
            lr,
            grad_norm,
            e_init_mean: 0.0,
            e_final_mean: 0.0,
            n_real: 1,
            nfe_cum: self.nfe_cum,
            flops_cum: self.flops_cum,
            step_losses: vec![loss_value],
            alpha: 0.0,
        };
        self.step += 1;
        Ok(record)
    }
}
