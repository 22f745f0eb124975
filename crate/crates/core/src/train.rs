//! Training by backpropagating through unrolled energy minimization.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ebt_autodiff::rng::{seeded, standard_normal, uniform, EngineRng};
use ebt_autodiff::{grad, no_grad, Value};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EbtError, Result};
use crate::flops::flops_ebt_per_token;
use crate::model::{
    think_step, Context, EbtConfig, EbtModel, EnergyFunction, PredictionState, StepOptions, Variant, ALPHA_PARAM,
};
use crate::tasks::metrics::{cross_entropy, smooth_l1};
use crate::tasks::{Batch, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub replay_capacity: usize,
    pub replay_probability: f64,
    pub smooth_l1_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 10_000,
            total_steps: 100_000,
            batch_size: 32,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            replay_capacity: 1024,
            replay_probability: 0.05,
            smooth_l1_beta: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(EbtError::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(EbtError::config("batch_size, lr and grad_clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.replay_probability) {
            return Err(EbtError::config("replay_probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay to a tenth of the peak.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return peak;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = peak / 10.0;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Realized optimization settings for one call.
#[derive(Clone, Debug)]
pub struct OptimizationSchedule {
    pub n_real: usize,
    /// Per (row, position) multipliers on the base step size; `None` means
    /// the base step size is used as is.
    pub alpha_scale: Option<Vec<f64>>,
    pub sigma: f64,
    pub detach: bool,
    pub truncate: bool,
}

pub fn draw_schedule(cfg: &EbtConfig, batch: usize, len: usize, rng: &mut EngineRng) -> OptimizationSchedule {
    let n_real = match cfg.variant {
        Variant::S1 => cfg.num_steps,
        Variant::S2 => rng.gen_range(cfg.min_steps..=cfg.max_steps),
    };
    let r = cfg.alpha_random_factor;
    let alpha_scale = (r > 1.0).then(|| uniform(rng, batch * len, 1.0 / r, r));
    OptimizationSchedule {
        n_real,
        alpha_scale,
        sigma: cfg.langevin_sigma,
        detach: cfg.detach_between_steps,
        truncate: cfg.truncate_loss_to_last_step,
    }
}

impl OptimizationSchedule {
    /// Step size as a graph value: `base` or `base * u` shaped `[B, S, 1]`.
    pub fn alpha_eff(&self, base: &Value, batch: usize, len: usize) -> Value {
        match &self.alpha_scale {
            None => base.clone(),
            Some(u) => base.mul(&Value::constant(u.clone(), &[batch, len, 1])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReplayEntry {
    /// Single-row snapshot of the example.
    pub example: Batch,
    /// Detached final prediction, `[1, S, W]` row-major.
    pub prediction: Vec<f64>,
    pub steps_taken: usize,
}

/// FIFO store of optimized predictions, resumed later as starting points.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub sample_probability: f64,
    entries: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, sample_probability: f64) -> Self {
        Self { capacity, sample_probability, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// A stored state with probability `sample_probability`; `None` means
    /// start from fresh noise.
    pub fn sample(&self, rng: &mut EngineRng) -> Option<&ReplayEntry> {
        if self.entries.is_empty() || self.sample_probability <= 0.0 {
            return None;
        }
        if !rng.gen_bool(self.sample_probability.min(1.0)) {
            return None;
        }
        self.entries.get(rng.gen_range(0..self.entries.len()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }
}

/// Result of unrolling the inner optimization with a graph kept for the
/// outer gradient.
pub struct Unrolled {
    pub loss: Value,
    pub step_losses: Vec<f64>,
    pub initial_energies: Value,
    pub final_state: PredictionState,
    pub grad_norms: Vec<f64>,
}

/// Runs `schedule.n_real` differentiable optimization steps from `start`
/// and builds the training loss: the last-step loss when truncating,
/// otherwise the mean over steps.
#[allow(clippy::too_many_arguments)]
pub fn unroll<E: EnergyFunction + ?Sized>(
    model: &E,
    ctx: &Context,
    start: PredictionState,
    alpha: &Value,
    schedule: &OptimizationSchedule,
    grad_clamp: Option<f64>,
    loss_fn: &dyn Fn(&Value) -> Value,
    rng: &mut EngineRng,
) -> Result<Unrolled> {
    if schedule.n_real == 0 {
        return Err(EbtError::contract("training needs at least one optimization step"));
    }
    let opts = StepOptions { create_graph: true, detach: schedule.detach, grad_clamp };
    let mut state = start;
    let mut losses = Vec::new();
    let mut step_losses = Vec::new();
    let mut grad_norms = Vec::new();
    let mut initial = None;
    for i in 0..schedule.n_real {
        let out = think_step(model, ctx, &state, alpha, schedule.sigma, opts, rng)?;
        initial.get_or_insert(out.energies);
        grad_norms.push(out.grad_norm);
        state = out.state;
        if !schedule.truncate || i + 1 == schedule.n_real {
            let l = loss_fn(&state.values);
            step_losses.push(l.item());
            losses.push(l);
        }
    }
    let loss = if losses.len() == 1 {
        losses.pop().unwrap()
    } else {
        let n = losses.len() as f64;
        losses.iter().skip(1).fold(losses[0].clone(), |acc, l| acc.add(l)).scale(1.0 / n)
    };
    Ok(Unrolled { loss, step_losses, initial_energies: initial.unwrap(), final_state: state, grad_norms })
}

/// Task loss `J(y_hat, y)` for a batch.
pub fn task_loss(pred: &Value, batch: &Batch, smooth_l1_beta: f64) -> Value {
    match &batch.target {
        Target::Tokens(t) => cross_entropy(pred, t, Some(&batch.weights)),
        Target::Features(v) => smooth_l1(pred, v, smooth_l1_beta),
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Updated copies of `params`. `lrs` holds one learning rate per
    /// parameter, `decay` whether it is weight-decayed.
    pub fn step(&mut self, params: &[&[f64]], grads: &[Vec<f64>], lrs: &[f64], decay: &[bool]) -> Vec<Vec<f64>> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let lr = lrs[i];
            let mut next = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                next.push(p[j] - lr * (update + wd * p[j]));
            }
            out.push(next);
        }
        out
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

pub const CSV_HEADER: &str = "step,loss,lr,grad_norm,e_init_mean,e_final_mean,n_real,nfe_cum,flops_cum";

/// Per-step training metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub e_init_mean: f64,
    pub e_final_mean: f64,
    pub n_real: usize,
    pub nfe_cum: u64,
    pub flops_cum: u128,
    #[serde(skip)]
    pub step_losses: Vec<f64>,
    #[serde(skip)]
    pub alpha: f64,
}

impl StepRecord {
    pub fn energy_gap(&self) -> f64 {
        self.e_init_mean - self.e_final_mean
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.lr,
            self.grad_norm,
            self.e_init_mean,
            self.e_final_mean,
            self.n_real,
            self.nfe_cum,
            self.flops_cum
        );
        s
    }
}

/// Owns a model, its optimizer state, and the training RNG.
pub struct Trainer {
    pub model: EbtModel,
    pub cfg: TrainConfig,
    pub replay: Option<ReplayBuffer>,
    pub step: usize,
    opt: AdamW,
    rng: EngineRng,
    nfe_cum: u64,
    flops_cum: u128,
    trajectory_sum: usize,
    trajectory_rows: usize,
    replayed_rows: usize,
}

impl Trainer {
    pub fn new(model: EbtModel, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = model.params.iter().map(|p| p.value.numel()).collect();
        let opt = AdamW::new(&cfg, &sizes);
        let replay = model
            .cfg
            .replay_buffer_enabled
            .then(|| ReplayBuffer::new(cfg.replay_capacity, cfg.replay_probability));
        Ok(Self {
            model,
            cfg,
            replay,
            step: 0,
            opt,
            rng: seeded(seed),
            nfe_cum: 0,
            flops_cum: 0,
            trajectory_sum: 0,
            trajectory_rows: 0,
            replayed_rows: 0,
        })
    }

    pub fn rng(&mut self) -> &mut EngineRng {
        &mut self.rng
    }

    /// Mean steps behind the final predictions so far, counting steps a
    /// replayed start had already taken.
    pub fn mean_trajectory_len(&self) -> f64 {
        self.trajectory_sum as f64 / self.trajectory_rows.max(1) as f64
    }

    pub fn replayed_rows(&self) -> usize {
        self.replayed_rows
    }

    fn fresh_start(&mut self, batch: &Batch) -> Vec<f64> {
        let n = batch.size() * batch.len() * self.model.cfg.mode.width();
        match (&batch.context, self.model.cfg.init_from_context) {
            (Context::Features(v), true) => v.to_vec(),
            _ => standard_normal(&mut self.rng, n),
        }
    }

    /// Swaps rows for replayed starts; returns the batch to train on, its
    /// starting predictions, and the steps each row had already taken.
    fn assemble_start(&mut self, batch: &Batch) -> Result<(Batch, Vec<f64>, Vec<usize>)> {
        let fresh = self.fresh_start(batch);
        let Some(buffer) = self.replay.as_ref() else {
            return Ok((batch.clone(), fresh, vec![0; batch.size()]));
        };
        let row = batch.len() * self.model.cfg.mode.width();
        let mut parts = Vec::with_capacity(batch.size());
        let mut start = Vec::with_capacity(fresh.len());
        let mut prior = Vec::with_capacity(batch.size());
        let mut any = false;
        for r in 0..batch.size() {
            match buffer.sample(&mut self.rng) {
                Some(e) => {
                    any = true;
                    parts.push(e.example.clone());
                    start.extend_from_slice(&e.prediction);
                    prior.push(e.steps_taken);
                }
                None => {
                    parts.push(batch.select(&[r]));
                    start.extend_from_slice(&fresh[r * row..(r + 1) * row]);
                    prior.push(0);
                }
            }
        }
        self.replayed_rows += prior.iter().filter(|&&p| p > 0).count();
        let batch = if any { Batch::stack(&parts)? } else { batch.clone() };
        Ok((batch, start, prior))
    }

    /// One outer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let (b, s, w) = (batch.size(), batch.len(), self.model.cfg.mode.width());
        let schedule = draw_schedule(&self.model.cfg, b, s, &mut self.rng);
        let (batch, start, prior) = self.assemble_start(batch)?;
        let y0 = PredictionState { values: Value::constant(start, &[b, s, w]), steps_taken: 0 };
        let alpha = schedule.alpha_eff(&self.model.alpha(), b, s);
        let beta = self.cfg.smooth_l1_beta;
        let loss_fn = |y: &Value| task_loss(y, &batch, beta);
        let unrolled = unroll(
            &self.model,
            &batch.context,
            y0,
            &alpha,
            &schedule,
            self.model.cfg.grad_clamp,
            &loss_fn,
            &mut self.rng,
        )?;
        let loss = unrolled.loss.item();
        let alpha_value = self.model.alpha_value();
        if !loss.is_finite() {
            return Err(EbtError::Instability {
                step: self.step,
                detail: format!(
                    "loss {loss}; alpha {alpha_value}; inner gradient norms {:?}",
                    unrolled.grad_norms
                ),
            });
        }
        let params = self.model.params.values();
        let mut grads: Vec<Vec<f64>> = grad(&unrolled.loss, &params, false)?.into_iter().map(|g| g.to_vec()).collect();
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(EbtError::Instability {
                step: self.step,
                detail: format!("parameter gradient norm {grad_norm}; alpha {alpha_value}; loss {loss}"),
            });
        }
        let lr = lr_at(self.step, &self.cfg);
        let (lrs, decay): (Vec<f64>, Vec<bool>) = self
            .model
            .params
            .iter()
            .map(|p| {
                let mult = if p.name == ALPHA_PARAM { self.model.cfg.alpha_lr_multiplier } else { 1.0 };
                (lr * mult, !p.no_decay && p.value.rank() >= 2)
            })
            .unzip();
        let data: Vec<&[f64]> = params.iter().map(|p| p.data()).collect();
        let updated = self.opt.step(&data, &grads, &lrs, &decay);
        for (i, d) in updated.into_iter().enumerate() {
            self.model.params.set(i, d);
        }

        let final_state = PredictionState {
            values: unrolled.final_state.values.detach(),
            steps_taken: unrolled.final_state.steps_taken,
        };
        let e_init_mean = unrolled.initial_energies.mean().item();
        let e_final_mean = no_grad(|| {
            self.model
                .energy_at(&batch.context, &final_state.values, final_state.steps_taken)
                .map(|e| e.mean().item())
        })?;

        let n = schedule.n_real;
        for (r, p) in prior.iter().enumerate() {
            self.trajectory_sum += p + n;
            self.trajectory_rows += 1;
            if let Some(buffer) = self.replay.as_mut() {
                let row = s * w;
                buffer.push(ReplayEntry {
                    example: batch.select(&[r]),
                    prediction: final_state.values.data()[r * row..(r + 1) * row].to_vec(),
                    steps_taken: p + n,
                });
            }
        }

        let nonembed = self.model.non_embedding_params() as u64;
        self.nfe_cum += n as u64;
        self.flops_cum += flops_ebt_per_token(nonembed, n as u64)? * (b * s) as u128;
        let record = StepRecord {
            step: self.step,
            loss,
            lr,
            grad_norm,
            e_init_mean,
            e_final_mean,
            n_real: n,
            nfe_cum: self.nfe_cum,
            flops_cum: self.flops_cum,
            step_losses: unrolled.step_losses,
            alpha: alpha_value,
        };
        self.step += 1;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_landmarks() {
        let cfg = TrainConfig { lr: 3e-3, warmup_steps: 100, total_steps: 1000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 3e-3);
        assert!((lr_at(1000, &cfg) - 3e-4).abs() < 1e-12);
        assert!((lr_at(50, &cfg) - 1.5e-3).abs() < 1e-15);
    }

    #[test]
    fn replay_is_fifo() {
        let entry = |k: usize| ReplayEntry {
            example: crate::tasks::Batch {
                context: Context::tokens(vec![k], 1, 1),
                target: Target::Tokens(vec![0]),
                weights: vec![1.0],
                clean: vec![],
            },
            prediction: vec![k as f64],
            steps_taken: k,
        };
        let mut buf = ReplayBuffer::new(2, 1.0);
        for k in 1..=3 {
            buf.push(entry(k));
        }
        let kept: Vec<usize> = buf.iter().map(|e| e.steps_taken).collect();
        assert_eq!(kept, vec![2, 3]);
        let never = ReplayBuffer { sample_probability: 0.0, ..buf.clone() };
        let mut rng = seeded(0);
        assert!((0..100).all(|_| never.sample(&mut rng).is_none()));
        assert!(ReplayBuffer::new(4, 1.0).sample(&mut rng).is_none());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 13.0);
        let after = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-6);
    }
}
