//! Optimizer, batching and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::batch::{Batch, BatchItem};
use crate::checkpoint::{Checkpoint, CONFIG_FILE, MOMENT_M, MOMENT_V};
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::fastspeech2::Mode;
use crate::features::{Split, Utterance};
use crate::matrix::Matrix;
use crate::nn::{site_rng, Graph, ParamStore, Tensor};
use crate::saltts::{LossBreakdown, Model};

pub const METRICS_HEADER: &str = "step,total,mel,duration,pitch,energy,aux,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Inverse-square-root schedule with linear warmup; `step` counts from 1
/// and the peak `learning_rate` is reached at `warmup_steps`.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.learning_rate * (s / w).min((w / s).sqrt())
}

/// Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..g.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            }
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
    }

    /// Moments as checkpoint tensors.
    pub fn tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            out.push((format!("{MOMENT_M}{}", p.name), m.clone()));
            out.push((format!("{MOMENT_V}{}", p.name), v.clone()));
        }
        out
    }

    pub fn from_checkpoint(store: &ParamStore, ckpt: &Checkpoint) -> Result<Self> {
        let mut adam = Self::new(store);
        for (i, p) in store.iter().enumerate() {
            for (prefix, slot) in [(MOMENT_M, &mut adam.m[i]), (MOMENT_V, &mut adam.v[i])] {
                let name = format!("{prefix}{}", p.name);
                let t = ckpt
                    .get(&name)
                    .ok_or_else(|| Error::Load(format!("checkpoint has no optimizer tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Load(format!("{name}: shape {:?} vs {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        adam.t = ckpt.step;
        Ok(adam)
    }
}

/// Forward, backward and one optimizer update at learning rate `lr`.
/// `step` seeds dropout. Non-finite losses abort before any update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
) -> Result<LossBreakdown> {
    let seed = model.config().seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let (breakdown, grads) = {
        let mut g = Graph::training(model.store(), seed);
        let out = model.forward(&mut g, batch, Mode::Train).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: forward pass diverged: {m}")),
            other => other,
        })?;
        let diagnose = |g: &Graph, m: &str| {
            let l = model.loss_values_unchecked(g, &out, batch);
            Error::Numeric(format!(
                "step {step}: {m}; terms mel={} duration={} pitch={} energy={} aux={} total={}",
                l.mel, l.duration, l.pitch, l.energy, l.aux, l.total
            ))
        };
        let (total, breakdown) = match model.loss(&mut g, &out, batch) {
            Ok(v) => v,
            Err(Error::Numeric(m)) => return Err(diagnose(&g, &m)),
            Err(e) => return Err(e),
        };
        if !breakdown.is_finite() {
            return Err(diagnose(&g, "loss is not finite"));
        }
        let grads = match g.backward(total) {
            Ok(grads) => grads,
            Err(Error::Numeric(m)) => return Err(diagnose(&g, &m)),
            Err(e) => return Err(e),
        };
        (breakdown, grads)
    };
    let store = model.store_mut();
    store.zero_grad();
    store.accumulate(&grads);
    adam.step(store, cfg, lr);
    store.zero_grad();
    Ok(breakdown)
}

/// Stateless batch order: step `s` of epoch `s / per_epoch` draws from a
/// permutation seeded by `(seed, epoch)`. Within windows of four batches
/// items are sorted by length so batches hold similar lengths.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    lengths: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(lengths: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Usage("no training utterances".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            lengths,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.lengths.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = site_rng(self.seed, &format!("train.epoch{epoch}"));
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut rng);
        for window in order.chunks_mut(self.batch_size * 4) {
            window.sort_by_key(|&i| (self.lengths[i], i));
        }
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        batches.shuffle(&mut rng);
        batches
    }

    /// Item indices for 0-based `step`.
    pub fn at(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        self.epoch(step / per)[(step % per) as usize].clone()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Continue from this checkpoint (which must hold optimizer state).
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Losses of every executed step, in order.
    pub history: Vec<LossBreakdown>,
    pub first_step: u64,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn metrics_row(step: u64, l: &LossBreakdown, lr: f64) -> String {
    format!(
        "{step},{},{},{},{},{},{},{lr}",
        l.total, l.mel, l.duration, l.pitch, l.energy, l.aux
    )
}

/// Batch items for the training split, SSL targets included when needed.
pub fn training_items(model: &Model, utterances: &[&Utterance]) -> Result<Vec<BatchItem>> {
    utterances.iter().map(|u| u.to_batch_item(model.config())).collect()
}

fn save_checkpoint(model: &Model, adam: &Adam, step: u64, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_model(model, step);
    ck.tensors.extend(adam.tensors(model.store()));
    ck.write(path)
}

/// Trains for `cfg.train.steps` steps in total on the train split of
/// `utterances`, writing metrics, periodic checkpoints and a final
/// checkpoint with its config under `out_dir`.
pub fn fit(cfg: &RunConfig, utterances: &[(&Utterance, Split)], out_dir: &Path, options: &FitOptions) -> Result<FitReport> {
    cfg.validate()?;
    let tc = &cfg.train;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;

    let mut model = Model::new(cfg.model.clone())?;
    let mut adam = Adam::new(model.store());
    let mut first_step = 0u64;
    if let Some(path) = &options.resume {
        let ck = Checkpoint::read(path)?;
        ck.restore_into(&mut model)?;
        adam = Adam::from_checkpoint(model.store(), &ck)?;
        first_step = ck.step;
    }

    let train: Vec<&Utterance> = utterances
        .iter()
        .filter(|(_, s)| *s == Split::Train)
        .map(|(u, _)| *u)
        .collect();
    let items = training_items(&model, &train)?;
    let plan = BatchPlan::new(items.iter().map(|i| i.mel.rows()).collect(), tc.batch_size, cfg.model.seed)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut history = Vec::new();
    let total = tc.steps as u64;
    for step in first_step..total {
        let picked: Vec<BatchItem> = plan.at(step).into_iter().map(|i| items[i].clone()).collect();
        let batch = Batch::from_items(&picked)?;
        let lr = learning_rate(tc, step + 1);
        let l = train_step(&mut model, &mut adam, &batch, tc, lr, step)?;
        history.push(l);
        let done = step + 1;
        if done == 1 || (tc.log_every > 0 && done % tc.log_every as u64 == 0) || done == total {
            writeln!(metrics, "{}", metrics_row(done, &l, lr)).expect("string write");
        }
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every as u64 == 0 && done != total {
            save_checkpoint(&model, &adam, done, &out_dir.join("checkpoints").join(format!("step{done:06}.ckpt")))?;
        }
    }
    fs::write(&metrics_path, metrics).map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&model, &adam, total.max(first_step), &final_checkpoint)?;
    Ok(FitReport {
        history,
        first_step,
        final_checkpoint,
        metrics: metrics_path,
    })
}

/// Inference-mode mel for one phoneme sequence.
pub fn synthesize(model: &Model, phonemes: &[usize]) -> Result<Matrix> {
    if phonemes.is_empty() {
        return Ok(Matrix::zeros(0, model.config().n_mels));
    }
    let batch = Batch::phonemes_only(&[phonemes.to_vec()]);
    let mut mels = model.synthesize_batch(&batch, crate::fastspeech2::DurationSource::Predicted)?;
    Ok(mels.remove(0))
}
