//! The energy function `E(x, y_hat)` and the single inner optimization step
//! shared by training and inference.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ebt_autodiff::rng::{seeded, standard_normal, EngineRng};
use ebt_autodiff::{grad, Value};
use serde::{Deserialize, Serialize};

use crate::error::{EbtError, Result};
use crate::nn::{rms_normalize, AttentionConfig, Block, BlockKind, SequencePair};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Tuned for training stability: detached steps, loss at every step,
    /// learnable step size.
    S1,
    /// Tuned for inference-time thinking: undetached steps, last-step loss,
    /// randomized schedule, Langevin noise, replay buffer.
    S2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataMode {
    /// Predictions are logits over a vocabulary.
    Discrete { vocab_size: usize },
    /// Predictions are raw feature vectors.
    Continuous { feature_dim: usize },
}

impl DataMode {
    pub fn width(&self) -> usize {
        match *self {
            DataMode::Discrete { vocab_size } => vocab_size,
            DataMode::Continuous { feature_dim } => feature_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Decoder-only: prediction `t` sees context `..=t` and itself.
    Causal,
    /// Every token sees every token.
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepEmbedding {
    Disabled,
    /// One embedding per optimization step index.
    PerStep,
    /// Every step uses index 0.
    Shared,
}

/// Model sizes from the scaling ladder: (layers, embedding dim, heads).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Xxs,
    Xs,
    Small,
    Medium,
    Large,
    Xl,
}

impl ModelSize {
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            ModelSize::Xxs => (6, 384, 6),
            ModelSize::Xs => (12, 384, 6),
            ModelSize::Small => (12, 768, 12),
            ModelSize::Medium => (24, 1024, 16),
            ModelSize::Large => (24, 1536, 16),
            ModelSize::Xl => (24, 2048, 32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbtConfig {
    pub variant: Variant,
    pub mode: DataMode,
    pub topology: Topology,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub rotary_base: f64,
    pub use_rotary: bool,
    /// Base optimization step count.
    pub num_steps: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub alpha: f64,
    pub alpha_learnable: bool,
    pub alpha_lr_multiplier: f64,
    pub alpha_random_factor: f64,
    pub langevin_sigma: f64,
    pub detach_between_steps: bool,
    pub truncate_loss_to_last_step: bool,
    pub replay_buffer_enabled: bool,
    pub grad_clamp: Option<f64>,
    pub step_embedding: StepEmbedding,
    pub step_embedding_count: usize,
    pub weight_tying: bool,
    pub shared_qkv: bool,
    /// Start predictions from the context instead of Gaussian noise
    /// (bidirectional denoising, where context and prediction share a space).
    pub init_from_context: bool,
    /// Use the full generalized-mask attention instead of the superdiagonal
    /// construction.
    pub reference_attention: bool,
}

impl EbtConfig {
    /// Stability-oriented preset.
    pub fn s1(mode: DataMode) -> Self {
        let (alpha, alpha_lr_multiplier) = match mode {
            DataMode::Discrete { .. } => (500.0, 1500.0),
            DataMode::Continuous { .. } => (30_000.0, 90_000.0),
        };
        Self {
            variant: Variant::S1,
            mode,
            topology: Topology::Causal,
            layers: 6,
            embed_dim: 384,
            heads: 6,
            ffn_multiplier: 1,
            rotary_base: 10_000.0,
            use_rotary: true,
            num_steps: 2,
            min_steps: 2,
            max_steps: 2,
            alpha,
            alpha_learnable: true,
            alpha_lr_multiplier,
            alpha_random_factor: 1.0,
            langevin_sigma: 0.0,
            detach_between_steps: true,
            truncate_loss_to_last_step: false,
            replay_buffer_enabled: false,
            grad_clamp: None,
            step_embedding: StepEmbedding::PerStep,
            step_embedding_count: 2,
            weight_tying: true,
            shared_qkv: true,
            init_from_context: false,
            reference_attention: false,
        }
    }

    /// Thinking-oriented preset.
    pub fn s2(mode: DataMode) -> Self {
        Self {
            variant: Variant::S2,
            num_steps: 2,
            min_steps: 2,
            max_steps: 3,
            alpha: 5.0,
            alpha_learnable: false,
            alpha_lr_multiplier: 1.0,
            alpha_random_factor: 2.0,
            langevin_sigma: 3.0,
            detach_between_steps: false,
            truncate_loss_to_last_step: true,
            replay_buffer_enabled: true,
            step_embedding: StepEmbedding::Shared,
            step_embedding_count: 1,
            ..Self::s1(mode)
        }
    }

    pub fn with_size(mut self, size: ModelSize) -> Self {
        let (layers, dim, heads) = size.dims();
        self.layers = layers;
        self.embed_dim = dim;
        self.heads = heads;
        self
    }

    pub fn with_dims(mut self, layers: usize, embed_dim: usize, heads: usize) -> Self {
        self.layers = layers;
        self.embed_dim = embed_dim;
        self.heads = heads;
        self
    }

    /// Removes every energy-landscape regularizer from an S2 configuration:
    /// fixed step size, fixed step count, no Langevin noise, no replay.
    pub fn without_regularizers(mut self) -> Self {
        self.alpha_random_factor = 1.0;
        self.min_steps = self.max_steps;
        self.num_steps = self.max_steps;
        self.langevin_sigma = 0.0;
        self.replay_buffer_enabled = false;
        self
    }

    /// Step count a model was trained for; the thinking baseline.
    pub fn train_steps(&self) -> usize {
        match self.variant {
            Variant::S1 => self.num_steps,
            Variant::S2 => self.max_steps,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_multiplier
    }

    pub fn attention(&self) -> AttentionConfig {
        let mut a = AttentionConfig::new(self.embed_dim, self.heads);
        a.rotary_base = self.rotary_base;
        a.use_rotary = self.use_rotary;
        a.causal = self.topology == Topology::Causal;
        a
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EbtError::config(m));
        if self.layers == 0 || self.embed_dim == 0 || self.heads == 0 {
            return fail("layers, embed_dim and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.use_rotary && (self.embed_dim / self.heads) % 2 != 0 {
            return fail("rotary encoding needs an even head dimension".into());
        }
        if self.mode.width() == 0 {
            return fail("vocabulary / feature width must be positive".into());
        }
        if self.num_steps == 0 || self.min_steps == 0 {
            return fail("optimization step counts must be at least 1".into());
        }
        if self.min_steps > self.max_steps {
            return fail(format!("min_steps {} > max_steps {}", self.min_steps, self.max_steps));
        }
        if !(self.alpha > 0.0) || !(self.alpha_random_factor >= 1.0) || !(self.langevin_sigma >= 0.0) {
            return fail("need alpha > 0, alpha_random_factor >= 1, langevin_sigma >= 0".into());
        }
        if self.step_embedding != StepEmbedding::Disabled && self.step_embedding_count == 0 {
            return fail("step_embedding_count must be positive when step embeddings are on".into());
        }
        if let Some(c) = self.grad_clamp {
            if !(c > 0.0) {
                return fail(format!("grad_clamp must be positive, got {c}"));
            }
        }
        if self.init_from_context && matches!(self.mode, DataMode::Discrete { .. }) {
            return fail("init_from_context needs continuous mode".into());
        }
        Ok(())
    }
}

/// Conditioning input for the energy function.
#[derive(Clone, Debug)]
pub enum Context {
    /// Token ids, row-major `[batch, len]`.
    Tokens { ids: Arc<Vec<usize>>, batch: usize, len: usize },
    /// Feature sequence `[batch, len, feature_dim]`.
    Features(Value),
}

impl Context {
    pub fn tokens(ids: Vec<usize>, batch: usize, len: usize) -> Self {
        assert_eq!(ids.len(), batch * len, "context: {} ids for {batch}x{len}", ids.len());
        Context::Tokens { ids: Arc::new(ids), batch, len }
    }

    pub fn batch(&self) -> usize {
        match self {
            Context::Tokens { batch, .. } => *batch,
            Context::Features(v) => v.shape()[0],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Context::Tokens { len, .. } => *len,
            Context::Features(v) => v.shape()[1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `rows` of the batch, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Context {
        match self {
            Context::Tokens { ids, len, .. } => {
                let mut out = Vec::with_capacity(rows.len() * len);
                for &r in rows {
                    out.extend_from_slice(&ids[r * len..(r + 1) * len]);
                }
                Context::tokens(out, rows.len(), *len)
            }
            Context::Features(v) => Context::Features(select_rows(v, rows)),
        }
    }
}

/// Rows of the leading axis of a constant value.
pub fn select_rows(v: &Value, rows: &[usize]) -> Value {
    let row = v.numel() / v.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        data.extend_from_slice(&v.data()[r * row..(r + 1) * row]);
    }
    let mut shape = v.shape().to_vec();
    shape[0] = rows.len();
    Value::constant(data, &shape)
}

/// Current predictions and how many optimization steps produced them.
#[derive(Clone, Debug)]
pub struct PredictionState {
    /// `[batch, S, V]` logits (discrete) or `[batch, S, F]` features.
    pub values: Value,
    pub steps_taken: usize,
}

/// I.i.d. standard normal initial predictions.
pub fn init_prediction(batch: usize, len: usize, width: usize, seed: u64) -> PredictionState {
    init_prediction_with(batch, len, width, &mut seeded(seed))
}

pub fn init_prediction_with(batch: usize, len: usize, width: usize, rng: &mut EngineRng) -> PredictionState {
    let shape = [batch, len, width];
    PredictionState {
        values: Value::constant(standard_normal(rng, batch * len * width), &shape),
        steps_taken: 0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    /// Keep the graph of the energy gradient so the update is differentiable
    /// with respect to parameters.
    pub create_graph: bool,
    /// Sever history to earlier steps before this one.
    pub detach: bool,
    pub grad_clamp: Option<f64>,
}

impl StepOptions {
    pub fn inference() -> Self {
        Self { create_graph: false, detach: true, grad_clamp: None }
    }
}

pub struct StepOutput {
    pub state: PredictionState,
    /// `[batch, S]` energies of the state the step started from.
    pub energies: Value,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct EbtModel {
    pub cfg: EbtConfig,
    pub params: ParamStore,
    token_embed: Option<ParamId>,
    vocab_proj: Option<ParamId>,
    feature_proj: Option<ParamId>,
    step_embed: Option<ParamId>,
    blocks: Vec<Block>,
    final_norm: ParamId,
    energy_head: ParamId,
    alpha: Option<ParamId>,
    forward_passes: AtomicUsize,
    optimization_evals: AtomicUsize,
}

impl Clone for EbtModel {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            token_embed: self.token_embed,
            vocab_proj: self.vocab_proj,
            feature_proj: self.feature_proj,
            step_embed: self.step_embed,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            energy_head: self.energy_head,
            alpha: self.alpha,
            forward_passes: AtomicUsize::new(0),
            optimization_evals: AtomicUsize::new(0),
        }
    }
}

pub const ALPHA_PARAM: &str = "alpha";

impl EbtModel {
    pub fn new(cfg: EbtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut ps = ParamStore::new();
        let d = cfg.embed_dim;
        let (mut token_embed, mut vocab_proj, mut feature_proj) = (None, None, None);
        match cfg.mode {
            DataMode::Discrete { vocab_size } => {
                token_embed = Some(ps.xavier("embed.tokens", vocab_size, d, &mut rng));
                if !cfg.weight_tying {
                    vocab_proj = Some(ps.xavier("embed.vocab_to_embed", vocab_size, d, &mut rng));
                }
            }
            DataMode::Continuous { feature_dim } => {
                feature_proj = Some(ps.xavier("embed.features", feature_dim, d, &mut rng));
            }
        }
        let step_embed = (cfg.step_embedding != StepEmbedding::Disabled)
            .then(|| ps.normal("embed.step", &[cfg.step_embedding_count, d], 1.0, &mut rng));
        let blocks = (0..cfg.layers)
            .map(|i| Block::register(&mut ps, &format!("blocks.{i}"), d, cfg.ffn_dim(), cfg.shared_qkv, &mut rng))
            .collect();
        let final_norm = ps.gain("final_norm", d);
        let energy_head = ps.xavier("energy_head", d, 1, &mut rng);
        let alpha = cfg
            .alpha_learnable
            .then(|| ps.register(ALPHA_PARAM, Value::parameter(vec![cfg.alpha], &[]), true));
        Ok(Self {
            cfg,
            params: ps,
            token_embed,
            vocab_proj,
            feature_proj,
            step_embed,
            blocks,
            final_norm,
            energy_head,
            alpha,
            forward_passes: AtomicUsize::new(0),
            optimization_evals: AtomicUsize::new(0),
        })
    }

    /// Step size as a graph value: the learnable parameter when there is one.
    pub fn alpha(&self) -> Value {
        match self.alpha {
            Some(id) => self.params.get(id).clone(),
            None => Value::scalar(self.cfg.alpha),
        }
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha().item()
    }

    pub fn embedding_param_names(&self) -> Vec<String> {
        ["embed.tokens", "embed.vocab_to_embed", "embed.step"]
            .iter()
            .filter(|n| self.params.by_name(n).is_some())
            .map(|n| n.to_string())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Parameters outside the embedding tables.
    pub fn non_embedding_params(&self) -> usize {
        let emb: usize = self
            .embedding_param_names()
            .iter()
            .map(|n| self.params.by_name(n).unwrap().value.numel())
            .sum();
        self.param_count() - emb
    }

    /// Forward passes through the energy function since construction.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Energy evaluations that drove an optimization step.
    pub fn optimization_evals(&self) -> usize {
        self.optimization_evals.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
        self.optimization_evals.store(0, Ordering::Relaxed);
    }

    /// Embedding index used at optimization step `step`.
    pub fn step_index_for(&self, step: usize) -> usize {
        match self.cfg.step_embedding {
            StepEmbedding::PerStep => step.min(self.cfg.step_embedding_count - 1),
            _ => 0,
        }
    }

    /// The learned vector prepended for `step_index`, `[D]`.
    pub fn step_embedding(&self, step_index: usize) -> Result<Value> {
        let id = self
            .step_embed
            .ok_or_else(|| EbtError::contract("step embeddings are disabled"))?;
        let table = self.params.get(id);
        if step_index >= table.shape()[0] {
            return Err(EbtError::contract(format!(
                "step index {step_index} out of range for {} step embeddings",
                table.shape()[0]
            )));
        }
        Ok(table.take_rows(Arc::new(vec![step_index])).reshape(&[self.cfg.embed_dim]))
    }

    /// Projects probability vectors `[B, S, V]` into embedding space by a
    /// weighted sum of embedding rows.
    pub fn vocab_to_embed(&self, distribution: &Value) -> Value {
        let table = self.vocab_proj.or(self.token_embed).expect("vocab_to_embed in continuous mode");
        distribution.matmul(self.params.get(table))
    }

    fn embed_context(&self, ctx: &Context) -> Result<Value> {
        let d = self.cfg.embed_dim;
        match (ctx, self.cfg.mode) {
            (Context::Tokens { ids, batch, len }, DataMode::Discrete { vocab_size }) => {
                if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
                    return Err(EbtError::contract(format!("token id {bad} >= vocab size {vocab_size}")));
                }
                let table = self.params.get(self.token_embed.unwrap());
                Ok(table.take_rows(ids.clone()).reshape(&[*batch, *len, d]))
            }
            (Context::Features(v), DataMode::Continuous { feature_dim }) => {
                if v.rank() != 3 || v.shape()[2] != feature_dim {
                    return Err(EbtError::contract(format!(
                        "context features {:?} do not end in feature_dim {feature_dim}",
                        v.shape()
                    )));
                }
                Ok(v.matmul(self.params.get(self.feature_proj.unwrap())))
            }
            _ => Err(EbtError::contract("context kind does not match the model's data mode")),
        }
    }

    fn embed_prediction(&self, y: &Value) -> Value {
        match self.cfg.mode {
            DataMode::Discrete { .. } => self.vocab_to_embed(&y.softmax()),
            DataMode::Continuous { .. } => y.matmul(self.params.get(self.feature_proj.unwrap())),
        }
    }

    fn check_shapes(&self, ctx: &Context, y: &Value) -> Result<()> {
        let want = [ctx.batch(), ctx.len(), self.cfg.mode.width()];
        if y.shape() != want {
            return Err(EbtError::contract(format!(
                "prediction shape {:?} does not match context (expected {want:?})",
                y.shape()
            )));
        }
        Ok(())
    }

    /// Per-position energies `[batch, S]` of predictions `y` given `ctx`.
    /// Lower is more compatible; values are unnormalized.
    pub fn energy(&self, ctx: &Context, y: &Value, step_index: usize) -> Result<Value> {
        self.check_shapes(ctx, y)?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let (b, s, d) = (ctx.batch(), ctx.len(), self.cfg.embed_dim);
        let mut observed = self.embed_context(ctx)?;
        let mut prefix = 0;
        if self.step_embed.is_some() {
            let step = self.step_embedding(step_index)?.reshape(&[1, 1, d]).broadcast_to(&[b, 1, d]);
            observed = Value::concat(&[step, observed], 1);
            prefix = 1;
        }
        let predicted = self.embed_prediction(y);
        let attn = self.cfg.attention();
        let out = match self.cfg.topology {
            Topology::Causal => {
                let kind = if self.cfg.reference_attention { BlockKind::EbtSimplified } else { BlockKind::EbtEfficient };
                let mut pair = SequencePair::new(observed, predicted, prefix);
                for block in &self.blocks {
                    pair = block.forward_ebt(&self.params, &pair, &attn, kind);
                }
                pair.predicted
            }
            Topology::Bidirectional => {
                let l = observed.shape()[1];
                // A prediction shares the position of the context element it reconstructs.
                let mut positions: Vec<f64> = (0..l).map(|i| i as f64).collect();
                positions.extend((0..s).map(|t| (t + prefix) as f64));
                let mut x = Value::concat(&[observed, predicted], 1);
                for block in &self.blocks {
                    x = block.forward_bidirectional(&self.params, &x, &attn, &positions);
                }
                x.slice(1, l, l + s)
            }
        };
        let h = rms_normalize(&out, self.params.get(self.final_norm));
        Ok(h.matmul(self.params.get(self.energy_head)).reshape(&[b, s]))
    }

    /// One update `y <- y - alpha * dE/dy + eta`, `eta ~ N(0, sigma^2)`.
    pub fn think_step(
        &self,
        ctx: &Context,
        state: &PredictionState,
        alpha: &Value,
        sigma: f64,
        opts: StepOptions,
        rng: &mut EngineRng,
    ) -> Result<StepOutput> {
        think_step(self, ctx, state, alpha, sigma, opts, rng)
    }
}

impl EnergyFunction for EbtModel {
    fn energy_at(&self, ctx: &Context, y: &Value, steps_taken: usize) -> Result<Value> {
        self.energy(ctx, y, self.step_index_for(steps_taken))
    }

    fn note_optimization_eval(&self) {
        self.optimization_evals.fetch_add(1, Ordering::Relaxed);
    }
}

/// Anything that scores predictions given a context, per position.
pub trait EnergyFunction {
    /// `[batch, S]` energies of `y` after `steps_taken` optimization steps.
    fn energy_at(&self, ctx: &Context, y: &Value, steps_taken: usize) -> Result<Value>;

    /// Called once per energy evaluation that drives an update.
    fn note_optimization_eval(&self) {}
}

/// One update `y <- y - alpha * dE/dy + eta`, `eta ~ N(0, sigma^2)`.
///
/// `alpha` is a scalar or `[batch, S, 1]` value; it may be a parameter.
pub fn think_step<E: EnergyFunction + ?Sized>(
    model: &E,
    ctx: &Context,
    state: &PredictionState,
    alpha: &Value,
    sigma: f64,
    opts: StepOptions,
    rng: &mut EngineRng,
) -> Result<StepOutput> {
    let y = if opts.detach || !state.values.requires_grad() {
        state.values.detach_requiring_grad()
    } else {
        state.values.clone()
    };
    let energies = model.energy_at(ctx, &y, state.steps_taken)?;
    model.note_optimization_eval();
    if !energies.is_finite() {
        return Err(EbtError::Instability {
            step: state.steps_taken,
            detail: "non-finite energy".into(),
        });
    }
    let mut g = grad(&energies.sum(), &[y.clone()], opts.create_graph)?.remove(0);
    let grad_norm = g.l2_norm();
    if !grad_norm.is_finite() {
        return Err(EbtError::Instability {
            step: state.steps_taken,
            detail: format!("non-finite energy gradient (norm {grad_norm})"),
        });
    }
    if let Some(c) = opts.grad_clamp {
        g = g.clamp(-c, c);
    }
    let mut next = y.sub(&alpha.mul(&g));
    if sigma > 0.0 {
        let noise = standard_normal(rng, next.numel()).into_iter().map(|v| v * sigma).collect();
        next = next.add(&Value::constant(noise, next.shape()));
    }
    if !opts.create_graph {
        next = next.detach();
    }
    Ok(StepOutput {
        state: PredictionState { values: next, steps_taken: state.steps_taken + 1 },
        energies,
        grad_norm,
    })
}
