//! Run orchestration: configuration files, training runs with metrics and
//! checkpoints, evaluation with thinking, and grid sweeps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ebt_autodiff::rng::{derive_seed, seeded};
use ebt_autodiff::{no_grad, with_precision, Precision, Value};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, BaselineModel, BaselineTrainer};
use crate::checkpoint;
use crate::error::{EbtError, Result};
use crate::flops::flops_ebt_per_token;
use crate::model::{EbtConfig, EbtModel, Variant};
use crate::tasks::metrics::nll_rows;
use crate::tasks::{images, Batch, Split, Target, TaskData, TaskSpec};
use crate::think::{argmax_rows, export_trace, self_verify, stt, EnergyTrace, SttReport, ThinkOptions, TraceExport};
use crate::train::{StepRecord, TrainConfig, Trainer, CSV_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Ebt(EbtConfig),
    Baseline(BaselineConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Thinking options; `steps = 0` means the model's training step count.
    pub think: ThinkOptions,
    pub candidates: usize,
    /// Validation rows scored per evaluation.
    pub rows: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { think: ThinkOptions { steps: 0, ..ThinkOptions::default() }, candidates: 1, rows: 256, batch_size: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: u32,
    pub out_dir: PathBuf,
    pub task: TaskSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Validation cadence in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Stop early once validation loss is at or below this.
    #[serde(default)]
    pub target_val_loss: Option<f64>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// Parses TOML. An EBT `[model]` table may name `preset = "s1" | "s2"`;
    /// the preset fills every field the table leaves out. The data mode is
    /// always derived from the task.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut root: toml::Value = text.parse::<toml::Table>().map_err(|e| EbtError::config(e.to_string()))?.into();
        let task: TaskSpec = root
            .get("task")
            .cloned()
            .ok_or_else(|| EbtError::config("missing [task]"))?
            .try_into()
            .map_err(|e: toml::de::Error| EbtError::config(format!("[task]: {e}")))?;
        if let Some(model) = root.get_mut("model").and_then(|m| m.as_table_mut()) {
            let is_ebt = model.get("kind").and_then(|k| k.as_str()) == Some("ebt");
            if let Some(preset) = model.remove("preset") {
                if !is_ebt {
                    return Err(EbtError::config("`preset` applies to kind = \"ebt\" only"));
                }
                let base = match preset.as_str() {
                    Some("s1") => EbtConfig::s1(task.mode()),
                    Some("s2") => EbtConfig::s2(task.mode()),
                    other => return Err(EbtError::config(format!("unknown preset {other:?}"))),
                };
                let mut full = toml::Value::try_from(&base).map_err(|e| EbtError::config(e.to_string()))?;
                merge(&mut full, toml::Value::Table(model.clone()));
                *model = full.as_table().unwrap().clone();
                model.insert("kind".into(), "ebt".into());
            }
            if is_ebt {
                let mode = toml::Value::try_from(task.mode()).map_err(|e| EbtError::config(e.to_string()))?;
                model.insert("mode".into(), mode);
            }
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| EbtError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EbtError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EbtError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn precision(&self) -> Result<Precision> {
        Precision::from_bits(self.precision)
            .ok_or_else(|| EbtError::config(format!("precision must be 32 or 64, got {}", self.precision)))
    }

    pub fn validate(&self) -> Result<()> {
        self.precision()?;
        self.train.validate()?;
        match &self.model {
            ModelSpec::Ebt(m) => {
                m.validate()?;
                if m.mode != self.task.mode() {
                    return Err(EbtError::config(format!(
                        "model mode {:?} does not match task mode {:?}",
                        m.mode,
                        self.task.mode()
                    )));
                }
            }
            ModelSpec::Baseline(b) => {
                b.validate()?;
                match self.task.mode() {
                    crate::model::DataMode::Discrete { vocab_size } if vocab_size == b.vocab_size => {}
                    _ => return Err(EbtError::config("the baseline needs a corpus task with the same vocabulary")),
                }
            }
        }
        if self.eval.candidates == 0 || self.eval.batch_size == 0 {
            return Err(EbtError::config("eval.candidates and eval.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("model.ckpt")
    }
}

pub enum AnyModel {
    Ebt(EbtModel),
    Baseline(BaselineModel),
}

impl AnyModel {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Ebt(c) => AnyModel::Ebt(EbtModel::new(c.clone(), seed)?),
            ModelSpec::Baseline(c) => AnyModel::Baseline(BaselineModel::new(c.clone(), seed)?),
        })
    }

    pub fn params(&self) -> &crate::params::ParamStore {
        match self {
            AnyModel::Ebt(m) => &m.params,
            AnyModel::Baseline(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut crate::params::ParamStore {
        match self {
            AnyModel::Ebt(m) => &mut m.params,
            AnyModel::Baseline(m) => &mut m.params,
        }
    }

    pub fn non_embedding_params(&self) -> usize {
        match self {
            AnyModel::Ebt(m) => m.non_embedding_params(),
            AnyModel::Baseline(m) => m.non_embedding_params(),
        }
    }

    /// Optimization steps a trained model uses by default.
    pub fn train_steps(&self) -> usize {
        match self {
            AnyModel::Ebt(m) => m.cfg.train_steps(),
            AnyModel::Baseline(_) => 1,
        }
    }
}

/// Scores on one evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub rows: usize,
    pub steps: usize,
    pub candidates: usize,
    /// Task loss: cross-entropy (symbols) or mean squared error in model
    /// space (features, patches).
    pub loss: f64,
    /// Mean loss of the individual candidates before selection.
    pub candidate_mean_loss: f64,
    pub perplexity: Option<f64>,
    pub accuracy: Option<f64>,
    pub psnr: Option<f64>,
    pub psnr_noised: Option<f64>,
    pub mse_pixel: Option<f64>,
    pub mse_unit: Option<f64>,
    pub nfe: usize,
    /// Fraction of trajectories with non-increasing energy across steps.
    pub non_increasing_fraction: f64,
    /// Fraction of positions whose chosen energy is the candidate minimum.
    pub argmin_exact_fraction: f64,
    pub mean_final_energy: f64,
}

struct Acc {
    loss: f64,
    cand_loss: f64,
    weight: f64,
    correct: f64,
    psnr: f64,
    psnr_noised: f64,
    mse_pixel: f64,
    images: usize,
    nfe: usize,
    monotone: f64,
    monotone_n: f64,
    exact: usize,
    positions: usize,
    energy: f64,
}

/// Per-row losses plus the row weight for one prediction.
fn row_losses(pred: &Value, batch: &Batch) -> (Vec<f64>, Vec<f64>) {
    let w = *pred.shape().last().unwrap();
    match &batch.target {
        Target::Tokens(t) => (nll_rows(pred.data(), w, t), batch.weights.clone()),
        Target::Features(v) => {
            let errs = pred
                .data()
                .chunks(w)
                .zip(v.data().chunks(w))
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / w as f64)
                .collect();
            (errs, batch.weights.clone())
        }
    }
}

/// Batches over the first `rows` validation rows, with noise for image
/// tasks drawn from a stream fixed by `seed`.
pub fn eval_batches(data: &TaskData, rows: usize, batch_size: usize, sigma: Option<f64>, seed: u64) -> Vec<Batch> {
    let n = rows.min(data.size(Split::Val));
    let mut rng = seeded(derive_seed(seed, 0xE7A1));
    (0..n)
        .step_by(batch_size)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            data.batch(Split::Val, &idx, sigma, &mut rng)
        })
        .collect()
}

/// Thinks on every batch with `candidates` seeds and aggregates metrics.
pub fn evaluate_ebt(
    model: &EbtModel,
    data: &TaskData,
    batches: &[Batch],
    opts: &ThinkOptions,
    candidates: usize,
    seed: u64,
) -> Result<(EvalMetrics, Vec<EnergyTrace>)> {
    let mut acc = Acc {
        loss: 0.0,
        cand_loss: 0.0,
        weight: 0.0,
        correct: 0.0,
        psnr: 0.0,
        psnr_noised: 0.0,
        mse_pixel: 0.0,
        images: 0,
        nfe: 0,
        monotone: 0.0,
        monotone_n: 0.0,
        exact: 0,
        positions: 0,
        energy: 0.0,
    };
    let mut traces = Vec::with_capacity(batches.len());
    for (k, batch) in batches.iter().enumerate() {
        let seeds: Vec<u64> = (0..candidates).map(|j| derive_seed(seed, (k as u64) << 16 | j as u64)).collect();
        let thought = self_verify(model, &batch.context, opts, &seeds)?;
        let (losses, weights) = row_losses(&thought.prediction, batch);
        let wsum: f64 = weights.iter().sum();
        acc.loss += losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>();
        acc.weight += wsum;
        for cand in &thought.candidates {
            let (cl, _) = row_losses(cand, batch);
            acc.cand_loss += cl.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / candidates as f64;
        }
        if let Target::Tokens(t) = &batch.target {
            let w = model.cfg.mode.width();
            let pred = argmax_rows(thought.prediction.data(), w);
            acc.correct += pred.iter().zip(t).zip(&weights).map(|((p, t), w)| if p == t { *w } else { 0.0 }).sum::<f64>();
        }
        if !batch.clean.is_empty() {
            let imgs = data.images_from_patches(&thought.prediction);
            let noised = match &batch.context {
                crate::model::Context::Features(v) => data.images_from_patches(v),
                _ => unreachable!(),
            };
            for ((clean, out), noisy) in batch.clean.iter().zip(&imgs).zip(&noised) {
                acc.psnr += images::psnr(clean, out);
                acc.psnr_noised += images::psnr(clean, noisy);
                acc.mse_pixel += images::mse_pixel(clean, out);
                acc.images += 1;
            }
        }
        let tr = &thought.trace;
        acc.nfe += tr.nfe;
        let cells = (tr.batch * tr.positions * tr.candidates.len()) as f64;
        acc.monotone += tr.non_increasing_fraction(0.0) * cells;
        acc.monotone_n += cells;
        let chosen = tr.chosen_energies();
        for (i, e) in chosen.iter().enumerate() {
            if tr.candidates.iter().all(|c| *e <= c.final_energies()[i]) {
                acc.exact += 1;
            }
            acc.energy += e;
        }
        acc.positions += chosen.len();
        traces.push(thought.trace);
    }
    let loss = acc.loss / acc.weight.max(1e-300);
    let discrete = matches!(data.spec, TaskSpec::Corpus { .. });
    let imgs = acc.images as f64;
    let metrics = EvalMetrics {
        rows: batches.iter().map(|b| b.size()).sum(),
        steps: opts.steps,
        candidates,
        loss,
        candidate_mean_loss: acc.cand_loss / acc.weight.max(1e-300),
        perplexity: discrete.then(|| loss.exp()),
        accuracy: discrete.then(|| acc.correct / acc.weight.max(1e-300)),
        psnr: (acc.images > 0).then(|| acc.psnr / imgs),
        psnr_noised: (acc.images > 0).then(|| acc.psnr_noised / imgs),
        mse_pixel: (acc.images > 0).then(|| acc.mse_pixel / imgs),
        mse_unit: (acc.images > 0).then(|| acc.mse_pixel / imgs / (255.0 * 255.0)),
        nfe: acc.nfe / batches.len().max(1),
        non_increasing_fraction: acc.monotone / acc.monotone_n.max(1.0),
        argmin_exact_fraction: acc.exact as f64 / acc.positions.max(1) as f64,
        mean_final_energy: acc.energy / acc.positions.max(1) as f64,
    };
    Ok((metrics, traces))
}

pub fn evaluate_baseline(model: &BaselineModel, batches: &[Batch]) -> Result<EvalMetrics> {
    let (mut loss, mut weight, mut correct) = (0.0, 0.0, 0.0);
    for batch in batches {
        let logits = no_grad(|| model.logits(&batch.context))?;
        let (losses, weights) = row_losses(&logits, batch);
        loss += losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>();
        weight += weights.iter().sum::<f64>();
        if let Target::Tokens(t) = &batch.target {
            let pred = argmax_rows(logits.data(), model.cfg.vocab_size);
            correct += pred.iter().zip(t).zip(&weights).map(|((p, t), w)| if p == t { *w } else { 0.0 }).sum::<f64>();
        }
    }
    let loss = loss / weight.max(1e-300);
    Ok(EvalMetrics {
        rows: batches.iter().map(|b| b.size()).sum(),
        steps: 1,
        candidates: 1,
        loss,
        candidate_mean_loss: loss,
        perplexity: Some(loss.exp()),
        accuracy: Some(correct / weight.max(1e-300)),
        nfe: 1,
        non_increasing_fraction: 1.0,
        argmin_exact_fraction: 1.0,
        ..EvalMetrics::default()
    })
}

fn validate_model(model: &AnyModel, data: &TaskData, cfg: &RunConfig) -> Result<EvalMetrics> {
    let batches = eval_batches(data, cfg.eval.rows, cfg.eval.batch_size, None, cfg.seed);
    match model {
        AnyModel::Ebt(m) => {
            let opts = ThinkOptions { steps: m.cfg.train_steps(), ..cfg.eval.think.clone() };
            Ok(evaluate_ebt(m, data, &batches, &opts, 1, cfg.eval.seed)?.0)
        }
        AnyModel::Baseline(m) => evaluate_baseline(m, &batches),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ValPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub steps_run: usize,
    pub final_record: Option<StepRecord>,
    pub validation: Vec<ValPoint>,
    pub final_val_loss: f64,
    pub nonembed_params: usize,
    pub mean_trajectory_len: Option<f64>,
    pub metrics_csv: PathBuf,
    pub checkpoint: PathBuf,
}

enum AnyTrainer {
    Ebt(Box<Trainer>),
    Baseline(Box<BaselineTrainer>),
}

impl AnyTrainer {
    fn step(&mut self, b: &Batch) -> Result<StepRecord> {
        match self {
            AnyTrainer::Ebt(t) => t.train_step(b),
            AnyTrainer::Baseline(t) => t.train_step(b),
        }
    }

    fn snapshot(&self) -> AnyModel {
        match self {
            AnyTrainer::Ebt(t) => AnyModel::Ebt(t.model.clone()),
            AnyTrainer::Baseline(t) => AnyModel::Baseline(t.model.clone()),
        }
    }

    fn params(&self) -> &crate::params::ParamStore {
        match self {
            AnyTrainer::Ebt(t) => &t.model.params,
            AnyTrainer::Baseline(t) => &t.model.params,
        }
    }
}

/// Loads a checkpoint written by [`run_train`] with its run config.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, AnyModel, usize)> {
    let decoded = checkpoint::load::<RunConfig>(path)?;
    let mut model = AnyModel::build(&decoded.config.model, 0)?;
    checkpoint::restore(model.params_mut(), &decoded.tensors)?;
    Ok((decoded.config, model, decoded.step))
}

fn write_checkpoint(cfg: &RunConfig, params: &crate::params::ParamStore, step: usize) -> Result<()> {
    checkpoint::save(&cfg.checkpoint_path(), params, cfg, step, cfg.precision)
}

/// Trains per `cfg`, streaming per-step metrics to `metrics.csv` and
/// validation losses to `validation.csv` in the output directory.
pub fn run_train(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let precision = cfg.precision()?;
    with_precision(precision, || run_train_inner(cfg))
}

fn run_train_inner(cfg: &RunConfig) -> Result<RunOutcome> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let data = TaskData::build(&cfg.task, derive_seed(cfg.seed, 1))?;
    let model = AnyModel::build(&cfg.model, derive_seed(cfg.seed, 2))?;
    let nonembed = model.non_embedding_params();
    let mut trainer = match model {
        AnyModel::Ebt(m) => AnyTrainer::Ebt(Box::new(Trainer::new(m, cfg.train.clone(), derive_seed(cfg.seed, 3))?)),
        AnyModel::Baseline(m) => AnyTrainer::Baseline(Box::new(BaselineTrainer::new(m, cfg.train.clone())?)),
    };
    let mut csv = std::io::BufWriter::new(fs::File::create(cfg.metrics_path())?);
    writeln!(csv, "{CSV_HEADER}")?;
    let mut val_csv = std::io::BufWriter::new(fs::File::create(cfg.out_dir.join("validation.csv"))?);
    writeln!(val_csv, "step,val_loss")?;

    let mut rng = seeded(derive_seed(cfg.seed, 4));
    let n_train = data.size(Split::Train);
    let mut validation = Vec::new();
    let mut last = None;
    let mut steps_run = 0;
    for step in 0..cfg.train.total_steps {
        let idx: Vec<usize> = (0..cfg.train.batch_size).map(|_| rng.gen_range(0..n_train)).collect();
        let batch = data.batch(Split::Train, &idx, None, &mut rng);
        let record = trainer.step(&batch).inspect_err(|_| {
            let _ = csv.flush();
        })?;
        writeln!(csv, "{}", record.csv_row())?;
        last = Some(record);
        steps_run = step + 1;
        let at_end = steps_run == cfg.train.total_steps;
        if cfg.eval_every > 0 && steps_run % cfg.eval_every == 0 && !at_end {
            let v = validate_model(&trainer.snapshot(), &data, cfg)?;
            writeln!(val_csv, "{steps_run},{}", v.loss)?;
            validation.push(ValPoint { step: steps_run, loss: v.loss });
            if cfg.target_val_loss.is_some_and(|t| v.loss <= t) {
                break;
            }
        }
        if cfg.checkpoint_every > 0 && steps_run % cfg.checkpoint_every == 0 {
            write_checkpoint(cfg, trainer.params(), steps_run)?;
        }
    }
    let needs_final = validation.last().map(|v: &ValPoint| v.step) != Some(steps_run);
    if needs_final {
        let v = validate_model(&trainer.snapshot(), &data, cfg)?;
        writeln!(val_csv, "{steps_run},{}", v.loss)?;
        validation.push(ValPoint { step: steps_run, loss: v.loss });
    }
    csv.flush()?;
    val_csv.flush()?;
    write_checkpoint(cfg, trainer.params(), steps_run)?;
    let mean_trajectory_len = match &trainer {
        AnyTrainer::Ebt(t) => Some(t.mean_trajectory_len()),
        AnyTrainer::Baseline(_) => None,
    };
    Ok(RunOutcome {
        steps_run,
        final_record: last,
        final_val_loss: validation.last().unwrap().loss,
        validation,
        nonembed_params: nonembed,
        mean_trajectory_len,
        metrics_csv: cfg.metrics_path(),
        checkpoint: cfg.checkpoint_path(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint_step: usize,
    pub baseline: EvalMetrics,
    pub thinking: EvalMetrics,
    /// Relative improvement of the task loss (inverted ratio).
    pub stt: SttReport,
    /// Relative PSNR improvement for image tasks.
    pub stt_psnr: Option<SttReport>,
}

/// Evaluates a checkpoint with `steps` and `candidates` against the
/// training-step, single-candidate baseline on the same rows and seeds.
/// The energy trace of the first batch is exported as JSON when `trace_out`
/// is given.
pub fn run_eval(
    checkpoint_path: &Path,
    steps: Option<usize>,
    candidates: Option<usize>,
    precision: Option<u32>,
    trace_out: Option<&Path>,
) -> Result<EvalReport> {
    let (cfg, model, ckpt_step) = load_checkpoint(checkpoint_path)?;
    let bits = precision.unwrap_or(cfg.precision);
    let p = Precision::from_bits(bits).ok_or_else(|| EbtError::config(format!("precision must be 32 or 64, got {bits}")))?;
    with_precision(p, || {
        let data = TaskData::build(&cfg.task, derive_seed(cfg.seed, 1))?;
        let batches = eval_batches(&data, cfg.eval.rows, cfg.eval.batch_size, None, cfg.seed);
        let base_steps = model.train_steps();
        match &model {
            AnyModel::Ebt(m) => {
                let steps = steps.unwrap_or(if cfg.eval.think.steps == 0 { base_steps } else { cfg.eval.think.steps });
                let candidates = candidates.unwrap_or(cfg.eval.candidates);
                let base_opts = ThinkOptions { steps: base_steps, ..cfg.eval.think.clone() };
                let opts = ThinkOptions { steps, ..cfg.eval.think.clone() };
                let (baseline, _) = evaluate_ebt(m, &data, &batches, &base_opts, 1, cfg.eval.seed)?;
                let (thinking, traces) = evaluate_ebt(m, &data, &batches, &opts, candidates, cfg.eval.seed)?;
                if let (Some(path), Some(trace)) = (trace_out, traces.first()) {
                    let tokens = candidate_tokens(m, &data, &batches[0], &opts, candidates, cfg.eval.seed)?;
                    let ids: Vec<usize> = (0..trace.batch).collect();
                    let export: Vec<TraceExport> = export_trace(trace, tokens.as_deref(), &ids);
                    fs::write(path, serde_json::to_string_pretty(&export)?)?;
                }
                let report = stt(baseline.loss, thinking.loss, false)?;
                let stt_psnr = match (baseline.psnr, thinking.psnr) {
                    (Some(a), Some(b)) => Some(stt(a, b, true)?),
                    _ => None,
                };
                Ok(EvalReport { checkpoint_step: ckpt_step, baseline, thinking, stt: report, stt_psnr })
            }
            AnyModel::Baseline(m) => {
                let metrics = evaluate_baseline(m, &batches)?;
                Ok(EvalReport {
                    checkpoint_step: ckpt_step,
                    baseline: metrics.clone(),
                    thinking: metrics.clone(),
                    stt: stt(metrics.loss, metrics.loss, false)?,
                    stt_psnr: None,
                })
            }
        }
    })
}

fn candidate_tokens(
    model: &EbtModel,
    data: &TaskData,
    batch: &Batch,
    opts: &ThinkOptions,
    candidates: usize,
    seed: u64,
) -> Result<Option<Vec<Vec<usize>>>> {
    if !matches!(data.spec, TaskSpec::Corpus { .. }) {
        return Ok(None);
    }
    let seeds: Vec<u64> = (0..candidates).map(|j| derive_seed(seed, j as u64)).collect();
    let thought = self_verify(model, &batch.context, opts, &seeds)?;
    let w = model.cfg.mode.width();
    Ok(Some(thought.candidates.iter().map(|c| argmax_rows(c.data(), w)).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Width,
    Depth,
    Data,
    Steps,
}

impl std::str::FromStr for SweepAxis {
    type Err = EbtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width" => Ok(SweepAxis::Width),
            "depth" => Ok(SweepAxis::Depth),
            "data" => Ok(SweepAxis::Data),
            "steps" => Ok(SweepAxis::Steps),
            _ => Err(EbtError::config(format!("unknown sweep axis `{s}` (width|depth|data|steps)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub value: usize,
    pub final_val_loss: Option<f64>,
    pub nonembed_params: usize,
    pub flops_per_token: u128,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Least-squares slope of log(loss) against log(axis value).
    pub slope: Option<f64>,
    pub partial: bool,
}

/// Ordinary least squares fit of `log y = a + b log x`; returns `(b, a)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(EbtError::contract("log-log fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(EbtError::contract("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(EbtError::contract("log-log fit needs distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

pub fn point_config(base: &RunConfig, axis: SweepAxis, value: usize) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.out_dir = base.out_dir.join(format!("{}-{value}", serde_json::to_string(&axis)?.trim_matches('"')));
    match (&mut cfg.model, axis) {
        (ModelSpec::Ebt(m), SweepAxis::Width) => m.embed_dim = value,
        (ModelSpec::Baseline(m), SweepAxis::Width) => m.embed_dim = value,
        (ModelSpec::Ebt(m), SweepAxis::Depth) => m.layers = value,
        (ModelSpec::Baseline(m), SweepAxis::Depth) => m.layers = value,
        (_, SweepAxis::Steps) => {
            cfg.train.total_steps = value;
            cfg.train.warmup_steps = cfg.train.warmup_steps.min(value);
        }
        (_, SweepAxis::Data) => match &mut cfg.task {
            TaskSpec::Corpus { train_size, .. }
            | TaskSpec::Sequence { train_size, .. }
            | TaskSpec::Denoise { train_size, .. } => *train_size = value,
        },
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one run per grid value and fits the log-log slope over the
/// points that finished.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, grid: &[usize]) -> Result<SweepReport> {
    if grid.len() < 3 {
        return Err(EbtError::config("a sweep needs at least three grid points"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let cfg = point_config(base, axis, value)?;
        let model = AnyModel::build(&cfg.model, 0)?;
        let nonembed = model.non_embedding_params();
        let steps = model.train_steps() as u64;
        let flops = match &cfg.model {
            ModelSpec::Ebt(_) => flops_ebt_per_token(nonembed as u64, steps)?,
            ModelSpec::Baseline(_) => crate::flops::flops_ff_per_token(nonembed as u64)?,
        };
        let (loss, error) = match run_train(&cfg) {
            Ok(out) => (Some(out.final_val_loss), None),
            Err(e) => (None, Some(e.to_string())),
        };
        points.push(SweepPoint { value, final_val_loss: loss, nonembed_params: nonembed, flops_per_token: flops, error });
    }
    let done: Vec<&SweepPoint> = points.iter().filter(|p| p.final_val_loss.is_some()).collect();
    let partial = done.len() < points.len();
    let xs: Vec<f64> = done.iter().map(|p| p.value as f64).collect();
    let ys: Vec<f64> = done.iter().map(|p| p.final_val_loss.unwrap()).collect();
    let slope = fit_loglog(&xs, &ys).ok().map(|(s, _)| s);
    let report = SweepReport { axis, points, slope, partial };
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Convenience for presets used in docs and tests.
pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::S1 => "s1",
        Variant::S2 => "s2",
    }
}
