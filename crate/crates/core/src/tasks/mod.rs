//! Desk-scale datasets, batch assembly, and metrics.

pub mod corpus;
pub mod images;
pub mod metrics;

use ebt_autodiff::rng::{derive_seed, EngineRng};
use ebt_autodiff::Value;
use serde::{Deserialize, Serialize};

use crate::error::{EbtError, Result};
use crate::model::{select_rows, Context, DataMode};
pub use corpus::{gen_continuous, gen_corpus, gen_splits, CorpusKind, ToyCorpus};
pub use images::{apply_noise, make_schedule, psnr, DenoiseSample, Image, NoiseSchedule};
pub use metrics::{cross_entropy, perplexity, smooth_l1};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskSpec {
    /// Next-symbol prediction on a synthetic corpus.
    Corpus {
        corpus: CorpusKind,
        vocab_size: usize,
        seq_len: usize,
        train_size: usize,
        val_size: usize,
    },
    /// Next-step prediction on smooth multichannel sequences.
    Sequence {
        seq_len: usize,
        feature_dim: usize,
        train_size: usize,
        val_size: usize,
    },
    /// Patch-wise image denoising.
    Denoise {
        image_size: usize,
        patch_size: usize,
        train_size: usize,
        val_size: usize,
        train_sigma: f64,
        eval_sigma: f64,
        schedule_len: usize,
    },
}

impl TaskSpec {
    pub fn copy(vocab_size: usize, seq_len: usize) -> Self {
        TaskSpec::Corpus { corpus: CorpusKind::Copy, vocab_size, seq_len, train_size: 4096, val_size: 256 }
    }

    pub fn dyck(vocab_size: usize, seq_len: usize, max_depth: usize) -> Self {
        TaskSpec::Corpus {
            corpus: CorpusKind::Dyck { max_depth },
            vocab_size,
            seq_len,
            train_size: 4096,
            val_size: 256,
        }
    }

    pub fn denoise() -> Self {
        TaskSpec::Denoise {
            image_size: 32,
            patch_size: 4,
            train_size: 512,
            val_size: 50,
            train_sigma: 0.1,
            eval_sigma: 0.2,
            schedule_len: images::DEFAULT_SCHEDULE_LEN,
        }
    }

    pub fn mode(&self) -> DataMode {
        match *self {
            TaskSpec::Corpus { vocab_size, .. } => DataMode::Discrete { vocab_size },
            TaskSpec::Sequence { feature_dim, .. } => DataMode::Continuous { feature_dim },
            TaskSpec::Denoise { patch_size, .. } => DataMode::Continuous { feature_dim: patch_size * patch_size },
        }
    }

    /// Number of predicted positions per example.
    pub fn prediction_len(&self) -> usize {
        match *self {
            TaskSpec::Corpus { seq_len, .. } | TaskSpec::Sequence { seq_len, .. } => seq_len - 1,
            TaskSpec::Denoise { image_size, patch_size, .. } => (image_size / patch_size).pow(2),
        }
    }

    pub fn is_denoise(&self) -> bool {
        matches!(self, TaskSpec::Denoise { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug)]
pub enum Target {
    /// One id per (row, position), row-major.
    Tokens(Vec<usize>),
    /// `[batch, S, F]`.
    Features(Value),
}

/// One training or evaluation batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub context: Context,
    pub target: Target,
    /// Loss weight per (row, position), row-major.
    pub weights: Vec<f64>,
    /// Clean images for pixel metrics (denoising only).
    pub clean: Vec<Image>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.context.batch()
    }

    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.size() == 0
    }

    /// Rows `rows` of this batch.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let s = self.len();
        let target = match &self.target {
            Target::Tokens(t) => Target::Tokens(rows.iter().flat_map(|&r| t[r * s..(r + 1) * s].iter().copied()).collect()),
            Target::Features(v) => Target::Features(select_rows(v, rows)),
        };
        Batch {
            context: self.context.select_rows(rows),
            target,
            weights: rows.iter().flat_map(|&r| self.weights[r * s..(r + 1) * s].iter().copied()).collect(),
            clean: if self.clean.is_empty() { vec![] } else { rows.iter().map(|&r| self.clean[r].clone()).collect() },
        }
    }

    /// Stacks single-row batches.
    pub fn stack(parts: &[Batch]) -> Result<Batch> {
        let first = parts.first().ok_or_else(|| EbtError::contract("cannot stack zero batches"))?;
        let b: usize = parts.iter().map(|p| p.size()).sum();
        let s = first.len();
        let context = match &first.context {
            Context::Tokens { .. } => {
                let mut ids = Vec::with_capacity(b * s);
                for p in parts {
                    match &p.context {
                        Context::Tokens { ids: i, .. } => ids.extend_from_slice(i),
                        _ => return Err(EbtError::contract("mixed context kinds in stack")),
                    }
                }
                Context::tokens(ids, b, s)
            }
            Context::Features(_) => {
                let vals: Vec<Value> = parts
                    .iter()
                    .map(|p| match &p.context {
                        Context::Features(v) => Ok(v.clone()),
                        _ => Err(EbtError::contract("mixed context kinds in stack")),
                    })
                    .collect::<Result<_>>()?;
                Context::Features(concat_constants(&vals))
            }
        };
        let target = match &first.target {
            Target::Tokens(_) => Target::Tokens(
                parts
                    .iter()
                    .flat_map(|p| match &p.target {
                        Target::Tokens(t) => t.clone(),
                        _ => vec![],
                    })
                    .collect(),
            ),
            Target::Features(_) => Target::Features(concat_constants(
                &parts
                    .iter()
                    .filter_map(|p| match &p.target {
                        Target::Features(v) => Some(v.clone()),
                        _ => None,
                    })
                    .collect::<Vec<_>>(),
            )),
        };
        Ok(Batch {
            context,
            target,
            weights: parts.iter().flat_map(|p| p.weights.iter().copied()).collect(),
            clean: parts.iter().flat_map(|p| p.clean.iter().cloned()).collect(),
        })
    }
}

fn concat_constants(vals: &[Value]) -> Value {
    let mut shape = vals[0].shape().to_vec();
    shape[0] = vals.iter().map(|v| v.shape()[0]).sum();
    Value::constant(vals.iter().flat_map(|v| v.data().iter().copied()).collect(), &shape)
}

enum Examples {
    Tokens(Vec<Vec<usize>>),
    Features(Vec<Vec<f64>>),
    Images(Vec<Image>),
}

/// Materialized train and validation data for a task.
pub struct TaskData {
    pub spec: TaskSpec,
    pub seed: u64,
    train: Examples,
    val: Examples,
    token_weights: Vec<f64>,
    pub schedule: Option<NoiseSchedule>,
}

impl TaskData {
    pub fn build(spec: &TaskSpec, seed: u64) -> Result<Self> {
        let mut token_weights = Vec::new();
        let mut schedule = None;
        let (train, val) = match *spec {
            TaskSpec::Corpus { corpus, vocab_size, seq_len, train_size, val_size } => {
                let (tr, va) = gen_splits(corpus, vocab_size, seq_len, train_size, val_size, seed)?;
                token_weights = tr.target_weights();
                (Examples::Tokens(tr.sequences), Examples::Tokens(va.sequences))
            }
            TaskSpec::Sequence { seq_len, feature_dim, train_size, val_size } => {
                let all = gen_continuous(train_size + val_size, seq_len, feature_dim, seed)?;
                let mut seqs = all.sequences;
                let va = seqs.split_off(train_size);
                (Examples::Features(seqs), Examples::Features(va))
            }
            TaskSpec::Denoise { image_size, patch_size, train_size, val_size, train_sigma, eval_sigma, schedule_len } => {
                if patch_size == 0 || image_size % patch_size != 0 {
                    return Err(EbtError::config(format!("patch size {patch_size} must divide image size {image_size}")));
                }
                for s in [train_sigma, eval_sigma] {
                    if !(s > 0.0 && s <= 1.0) {
                        return Err(EbtError::config(format!("noise fraction {s} must lie in (0, 1]")));
                    }
                }
                schedule = Some(make_schedule(schedule_len)?);
                let tr = images::texture_set(train_size, image_size, derive_seed(seed, 10));
                let va = images::texture_set(val_size, image_size, derive_seed(seed, 11));
                (Examples::Images(tr), Examples::Images(va))
            }
        };
        Ok(Self { spec: spec.clone(), seed, train, val, token_weights, schedule })
    }

    pub fn size(&self, split: Split) -> usize {
        match self.examples(split) {
            Examples::Tokens(v) => v.len(),
            Examples::Features(v) => v.len(),
            Examples::Images(v) => v.len(),
        }
    }

    fn examples(&self, split: Split) -> &Examples {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn token_sequences(&self, split: Split) -> Option<&[Vec<usize>]> {
        match self.examples(split) {
            Examples::Tokens(v) => Some(v),
            _ => None,
        }
    }

    /// Assembles a batch from example indices. `sigma` overrides the noise
    /// level for denoising; `rng` draws the noise.
    pub fn batch(&self, split: Split, indices: &[usize], sigma: Option<f64>, rng: &mut EngineRng) -> Batch {
        let b = indices.len();
        match (self.examples(split), &self.spec) {
            (Examples::Tokens(seqs), TaskSpec::Corpus { seq_len, .. }) => {
                let s = seq_len - 1;
                let mut ctx = Vec::with_capacity(b * s);
                let mut tgt = Vec::with_capacity(b * s);
                for &i in indices {
                    ctx.extend_from_slice(&seqs[i][..s]);
                    tgt.extend_from_slice(&seqs[i][1..]);
                }
                Batch {
                    context: Context::tokens(ctx, b, s),
                    target: Target::Tokens(tgt),
                    weights: self.token_weights.iter().copied().cycle().take(b * s).collect(),
                    clean: vec![],
                }
            }
            (Examples::Features(seqs), TaskSpec::Sequence { seq_len, feature_dim, .. }) => {
                let (s, f) = (seq_len - 1, *feature_dim);
                let mut ctx = Vec::with_capacity(b * s * f);
                let mut tgt = Vec::with_capacity(b * s * f);
                for &i in indices {
                    ctx.extend_from_slice(&seqs[i][..s * f]);
                    tgt.extend_from_slice(&seqs[i][f..]);
                }
                Batch {
                    context: Context::Features(Value::constant(ctx, &[b, s, f])),
                    target: Target::Features(Value::constant(tgt, &[b, s, f])),
                    weights: vec![1.0; b * s],
                    clean: vec![],
                }
            }
            (Examples::Images(imgs), TaskSpec::Denoise { image_size, patch_size, train_sigma, eval_sigma, .. }) => {
                let sigma = sigma.unwrap_or(if split == Split::Train { *train_sigma } else { *eval_sigma });
                let schedule = self.schedule.as_ref().unwrap();
                let (n, p) = (*image_size, *patch_size);
                let s = (n / p).pow(2);
                let mut ctx = Vec::with_capacity(b * n * n);
                let mut tgt = Vec::with_capacity(b * n * n);
                let mut clean = Vec::with_capacity(b);
                for &i in indices {
                    let sample = apply_noise(&imgs[i], sigma, schedule, rng);
                    ctx.extend(images::patchify(&sample.signal, n, p));
                    let signal: Vec<f64> = imgs[i].data.iter().map(|v| images::to_signal(*v)).collect();
                    tgt.extend(images::patchify(&signal, n, p));
                    clean.push(imgs[i].clone());
                }
                Batch {
                    context: Context::Features(Value::constant(ctx, &[b, s, p * p])),
                    target: Target::Features(Value::constant(tgt, &[b, s, p * p])),
                    weights: vec![1.0; b * s],
                    clean,
                }
            }
            _ => unreachable!("examples always match the task spec"),
        }
    }

    /// Converts `[B, S, p*p]` patch predictions back to `[0, 1]` images.
    pub fn images_from_patches(&self, patches: &Value) -> Vec<Image> {
        let TaskSpec::Denoise { image_size, patch_size, .. } = self.spec else {
            panic!("images_from_patches on a non-image task");
        };
        let per = image_size * image_size;
        patches
            .data()
            .chunks(per)
            .map(|chunk| {
                let signal = images::unpatchify(chunk, image_size, patch_size);
                Image::gray(image_size, image_size, signal.into_iter().map(images::from_signal).collect())
            })
            .collect()
    }
}
