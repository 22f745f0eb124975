//! Inference as optimization: thinking longer, best-of-N self-verification,
//! energy traces, and the relative-improvement metric.

use ebt_autodiff::rng::{seeded, standard_normal, uniform, EngineRng};
use ebt_autodiff::{no_grad, Value};
use serde::{Deserialize, Serialize};

use crate::error::{EbtError, Result};
use crate::model::{think_step, Context, EbtModel, EnergyFunction, PredictionState, StepOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThinkOptions {
    /// Optimization steps per prediction.
    pub steps: usize,
    /// Step size; the model's base step size when unset.
    pub alpha: Option<f64>,
    /// Langevin noise on every step except the last.
    pub sigma: f64,
    /// Draw per-position step-size multipliers as in training.
    pub randomize_alpha: bool,
    /// Stop once the mean energy changes by less than this.
    pub tolerance: Option<f64>,
}

impl Default for ThinkOptions {
    fn default() -> Self {
        Self { steps: 2, alpha: None, sigma: 0.0, randomize_alpha: false, tolerance: None }
    }
}

impl ThinkOptions {
    pub fn steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }
}

/// Energies along one trajectory. `energies[i]` holds `E(y_i)` for every
/// (row, position), row-major; the last entry scores the returned state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateTrace {
    pub seed: u64,
    pub energies: Vec<Vec<f64>>,
    pub steps_taken: usize,
}

impl CandidateTrace {
    pub fn final_energies(&self) -> &[f64] {
        self.energies.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyTrace {
    pub batch: usize,
    pub positions: usize,
    pub candidates: Vec<CandidateTrace>,
    /// Winning candidate per (row, position).
    pub chosen: Vec<usize>,
    /// Energy evaluations that drove optimization steps.
    pub nfe: usize,
}

impl EnergyTrace {
    /// Energy of the returned prediction per (row, position).
    pub fn chosen_energies(&self) -> Vec<f64> {
        self.chosen.iter().enumerate().map(|(i, &c)| self.candidates[c].final_energies()[i]).collect()
    }

    /// Fraction of (candidate, row, position) trajectories whose energy
    /// never rises from one step to the next, up to `tol`.
    pub fn non_increasing_fraction(&self, tol: f64) -> f64 {
        let mut good = 0usize;
        let mut total = 0usize;
        for c in &self.candidates {
            for p in 0..self.batch * self.positions {
                total += 1;
                if c.energies.windows(2).all(|w| w[1][p] <= w[0][p] + tol) {
                    good += 1;
                }
            }
        }
        good as f64 / total.max(1) as f64
    }
}

pub fn count_nfe(trace: &EnergyTrace) -> usize {
    trace.candidates.iter().map(|c| c.steps_taken).sum()
}

pub struct Thought {
    /// `[batch, S, W]` final predictions.
    pub prediction: Value,
    /// Final prediction of every candidate, in seed order.
    pub candidates: Vec<Value>,
    pub trace: EnergyTrace,
}

fn start_state(model: &EbtModel, ctx: &Context, rng: &mut EngineRng) -> PredictionState {
    let (b, s, w) = (ctx.batch(), ctx.len(), model.cfg.mode.width());
    let values = match ctx {
        Context::Features(v) if model.cfg.init_from_context => v.detach(),
        _ => Value::constant(standard_normal(rng, b * s * w), &[b, s, w]),
    };
    PredictionState { values, steps_taken: 0 }
}

fn trajectory(model: &EbtModel, ctx: &Context, opts: &ThinkOptions, seed: u64) -> Result<(Value, CandidateTrace)> {
    if opts.steps == 0 {
        return Err(EbtError::contract("thinking needs at least one optimization step"));
    }
    let mut rng = seeded(seed);
    let (b, s) = (ctx.batch(), ctx.len());
    let mut state = start_state(model, ctx, &mut rng);
    let base = Value::scalar(opts.alpha.unwrap_or_else(|| model.alpha_value()));
    let r = model.cfg.alpha_random_factor;
    let alpha = if opts.randomize_alpha && r > 1.0 {
        base.mul(&Value::constant(uniform(&mut rng, b * s, 1.0 / r, r), &[b, s, 1]))
    } else {
        base
    };
    let mut energies: Vec<Vec<f64>> = Vec::with_capacity(opts.steps + 1);
    for i in 0..opts.steps {
        let sigma = if i + 1 == opts.steps { 0.0 } else { opts.sigma };
        let out = think_step(model, ctx, &state, &alpha, sigma, StepOptions::inference(), &mut rng)
            .map_err(|e| name_step(e, i))?;
        let e = out.energies.to_vec();
        let stop = match (opts.tolerance, energies.last()) {
            (Some(tol), Some(prev)) => (mean(&e) - mean(prev)).abs() < tol,
            _ => false,
        };
        energies.push(e);
        state = out.state;
        if stop {
            break;
        }
    }
    let last = no_grad(|| model.energy_at(ctx, &state.values, state.steps_taken))?;
    if !last.is_finite() {
        return Err(EbtError::Instability { step: state.steps_taken, detail: "non-finite final energy".into() });
    }
    energies.push(last.to_vec());
    Ok((state.values, CandidateTrace { seed, energies, steps_taken: state.steps_taken }))
}

fn name_step(e: EbtError, i: usize) -> EbtError {
    match e {
        EbtError::Instability { detail, .. } => EbtError::Instability { step: i, detail: format!("thinking step {i}: {detail}") },
        other => other,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Optimizes predictions for `ctx` from noise drawn with `seed`. No
/// parameter gradients are built.
pub fn think(model: &EbtModel, ctx: &Context, opts: &ThinkOptions, seed: u64) -> Result<Thought> {
    self_verify(model, ctx, opts, &[seed])
}

/// Runs one trajectory per seed and keeps, for every position, the
/// candidate with the lowest final energy.
pub fn self_verify(model: &EbtModel, ctx: &Context, opts: &ThinkOptions, seeds: &[u64]) -> Result<Thought> {
    if seeds.is_empty() {
        return Err(EbtError::contract("self-verification needs at least one candidate"));
    }
    let (b, s, w) = (ctx.batch(), ctx.len(), model.cfg.mode.width());
    let mut preds = Vec::with_capacity(seeds.len());
    let mut traces = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (p, t) = trajectory(model, ctx, opts, seed)?;
        preds.push(p);
        traces.push(t);
    }
    let mut chosen = vec![0usize; b * s];
    for (i, c) in chosen.iter_mut().enumerate() {
        let mut best = traces[0].final_energies()[i];
        for (j, t) in traces.iter().enumerate().skip(1) {
            if t.final_energies()[i] < best {
                best = t.final_energies()[i];
                *c = j;
            }
        }
    }
    let mut data = Vec::with_capacity(b * s * w);
    for (i, &c) in chosen.iter().enumerate() {
        data.extend_from_slice(&preds[c].data()[i * w..(i + 1) * w]);
    }
    let mut trace = EnergyTrace { batch: b, positions: s, candidates: traces, chosen, nfe: 0 };
    trace.nfe = count_nfe(&trace);
    Ok(Thought { prediction: Value::constant(data, &[b, s, w]), candidates: preds, trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SttReport {
    pub baseline_metric: f64,
    pub metric_at_f: f64,
    pub higher_is_better: bool,
    pub stt: f64,
}

/// Relative improvement of `metric_at_f` over `baseline`:
/// `P(F)/P(F0) - 1` for scores, `P(F0)/P(F) - 1` for losses.
pub fn stt(baseline: f64, metric_at_f: f64, higher_is_better: bool) -> Result<SttReport> {
    if !(baseline > 0.0) {
        return Err(EbtError::contract(format!("baseline metric must be positive, got {baseline}")));
    }
    let ratio = if higher_is_better {
        metric_at_f / baseline
    } else {
        if !(metric_at_f > 0.0) {
            return Err(EbtError::contract(format!("loss must be positive to invert, got {metric_at_f}")));
        }
        baseline / metric_at_f
    };
    Ok(SttReport { baseline_metric: baseline, metric_at_f, higher_is_better, stt: ratio - 1.0 })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TracePosition {
    /// Argmax symbol of each candidate's final prediction (discrete only).
    pub tokens: Vec<usize>,
    /// Per candidate, the energy at every step.
    pub energies: Vec<Vec<f64>>,
    pub chosen: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceExport {
    pub context_id: usize,
    pub positions: Vec<TracePosition>,
    pub nfe: usize,
}

/// One JSON-ready record per batch row. `candidate_predictions` are the
/// per-candidate final predictions when available; `context_ids` name rows.
pub fn export_trace(
    trace: &EnergyTrace,
    candidate_tokens: Option<&[Vec<usize>]>,
    context_ids: &[usize],
) -> Vec<TraceExport> {
    let s = trace.positions;
    let per_row_nfe = trace.nfe;
    (0..trace.batch)
        .map(|r| TraceExport {
            context_id: context_ids.get(r).copied().unwrap_or(r),
            positions: (0..s)
                .map(|p| {
                    let i = r * s + p;
                    TracePosition {
                        tokens: candidate_tokens.map(|t| t.iter().map(|c| c[i]).collect()).unwrap_or_default(),
                        energies: trace.candidates.iter().map(|c| c.energies.iter().map(|e| e[i]).collect()).collect(),
                        chosen: trace.chosen[i],
                    }
                })
                .collect(),
            nfe: per_row_nfe,
        })
        .collect()
}

/// Argmax over the last axis for every row of `[.., W]` data.
pub fn argmax_rows(data: &[f64], w: usize) -> Vec<usize> {
    data.chunks(w)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
