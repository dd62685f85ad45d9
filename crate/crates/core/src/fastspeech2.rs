//! FastSpeech2 building blocks: phoneme encoder, variance adapter with
//! length regulator, mel decoder and the baseline loss terms.

use crate::batch::{lengths_mask, Batch};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{Embedding, FftBlock, FftBlockDims, Linear, VariancePredictor};
use crate::nn::{sinusoidal_positions, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth durations and pitch/energy drive the adapter.
    Train,
    /// Predictions drive the adapter.
    Infer,
}

/// Adds a `[B, L, D]` sinusoidal table to `x`.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let table = sinusoidal_positions(l, d);
    let tiled = Tensor::from_fn(&shape, |i| table.data()[i % (l * d)]);
    debug_assert_eq!(tiled.numel(), b * l * d);
    g.add_const(x, tiled)
}

fn block_stack(
    store: &mut ParamStore,
    prefix: &str,
    layers: usize,
    dims: &FftBlockDims,
    seed: u64,
) -> Result<Vec<FftBlock>> {
    (0..layers)
        .map(|i| FftBlock::new(store, &format!("{prefix}.block{i}"), dims, seed))
        .collect()
}

pub fn run_blocks(g: &mut Graph, blocks: &[FftBlock], x: Var, mask: &[bool]) -> Result<Var> {
    let mut x = g.mask_rows(x, mask)?;
    for b in blocks {
        x = b.forward(g, x, mask)?;
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embedding: Embedding,
    pub blocks: Vec<FftBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let dims = FftBlockDims {
            dim: cfg.adapter_dim,
            heads: cfg.heads,
            ffn_dim: cfg.ffn_dim,
            kernel: cfg.conv_kernel,
            dropout: cfg.dropout,
        };
        Ok(Self {
            embedding: Embedding::new(store, "encoder.embedding", cfg.vocab_size, cfg.adapter_dim, cfg.seed)?,
            blocks: block_stack(store, "encoder", cfg.encoder_layers, &dims, cfg.seed)?,
        })
    }

    /// `ids` is `[batch * len]`; returns `[batch, len, adapter_dim]`.
    pub fn forward(&self, g: &mut Graph, ids: &[usize], batch: usize, len: usize, mask: &[bool]) -> Result<Var> {
        let x = self.embedding.forward(g, ids, &[batch, len])?;
        let x = add_positions(g, x)?;
        run_blocks(g, &self.blocks, x, mask)
    }
}

/// Repeats phoneme row `i` of every item `durations[b][i]` times.
///
/// Output is `[B, T, D]` with `T` the longest expanded item; shorter items
/// are zero padded. Returns the output and its frame mask.
pub fn length_regulate(g: &mut Graph, h: Var, durations: &[Vec<usize>]) -> Result<(Var, Vec<bool>)> {
    let shape = g.shape(h).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    if durations.len() != b || durations.iter().any(|r| r.len() > l) {
        return Err(Error::Dimension(format!(
            "length_regulate: durations for {} items of up to {} phonemes, hidden is {shape:?}",
            durations.len(),
            durations.iter().map(Vec::len).max().unwrap_or(0)
        )));
    }
    let lengths: Vec<usize> = durations.iter().map(|r| r.iter().sum()).collect();
    let t = lengths.iter().copied().max().unwrap_or(0);
    let mut sources = vec![None; b * t];
    for (bi, row) in durations.iter().enumerate() {
        let mut pos = 0;
        for (i, &n) in row.iter().enumerate() {
            for _ in 0..n {
                sources[bi * t + pos] = Some(bi * l + i);
                pos += 1;
            }
        }
    }
    let out = g.gather_rows(h, sources, &[b, t, d])?;
    Ok((out, lengths_mask(&lengths, t)))
}

/// Same as [`length_regulate`] with signed durations, rejecting negatives.
pub fn length_regulate_checked(g: &mut Graph, h: Var, durations: &[Vec<i64>]) -> Result<(Var, Vec<bool>)> {
    let mut rows = Vec::with_capacity(durations.len());
    for r in durations {
        let mut row = Vec::with_capacity(r.len());
        for &n in r {
            if n < 0 {
                return Err(Error::Argument(format!("negative duration {n}")));
            }
            row.push(n as usize);
        }
        rows.push(row);
    }
    length_regulate(g, h, &rows)
}

/// Round half up, floored at zero.
pub fn round_duration(log_duration: f64) -> usize {
    let d = (log_duration.exp() + 0.5).floor();
    if d.is_finite() && d > 0.0 {
        d as usize
    } else {
        0
    }
}

/// Linear bucketing of a scalar into `bins` classes between `min` and `max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    boundaries: Vec<f64>,
}

impl Quantizer {
    pub fn new(min: f64, max: f64, bins: usize) -> Self {
        let n = bins.saturating_sub(1).max(1);
        let boundaries = if n == 1 {
            vec![min]
        } else {
            (0..n).map(|i| min + (max - min) * i as f64 / (n - 1) as f64).collect()
        };
        Self { boundaries }
    }

    pub fn bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Number of boundaries strictly below `v`.
    pub fn bucket(&self, v: f64) -> usize {
        self.boundaries.partition_point(|&b| b < v)
    }
}

/// Duration, pitch and energy predictors plus the pitch/energy embeddings.
#[derive(Debug, Clone)]
pub struct VarianceAdapter {
    pub duration: VariancePredictor,
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
    pub pitch_embedding: Embedding,
    pub energy_embedding: Embedding,
    pub pitch_quantizer: Quantizer,
    pub energy_quantizer: Quantizer,
}

/// Outputs of the adapter.
#[derive(Debug, Clone)]
pub struct AdapterOutput {
    /// `[B, T, adapter_dim]`, with pitch and energy embeddings added.
    pub hidden: Var,
    /// `[B, L, 1]` predicted log durations.
    pub log_duration: Var,
    /// `[B, T, 1]` predicted pitch and energy.
    pub pitch: Var,
    pub energy: Var,
    pub durations: Vec<Vec<usize>>,
    pub frames: usize,
    pub frame_mask: Vec<bool>,
}

/// How durations are chosen for expansion.
#[derive(Debug, Clone, Copy)]
pub enum DurationSource<'a> {
    Predicted,
    Given(&'a [Vec<usize>]),
}

/// Ground-truth variance information for one batch.
#[derive(Debug, Clone, Copy)]
pub struct VarianceTargets<'a> {
    pub durations: &'a [Vec<usize>],
    pub pitch: &'a [Vec<f64>],
    pub energy: &'a [Vec<f64>],
}

impl<'a> VarianceTargets<'a> {
    pub fn from_batch(batch: &'a Batch) -> Option<Self> {
        batch.has_targets().then_some(Self {
            durations: &batch.durations,
            pitch: &batch.pitch,
            energy: &batch.energy,
        })
    }
}

impl VarianceAdapter {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let p = |store: &mut ParamStore, name: &str| {
            VariancePredictor::new(
                store,
                name,
                cfg.adapter_dim,
                cfg.predictor_filter,
                cfg.predictor_kernel,
                cfg.dropout,
                cfg.seed,
            )
        };
        Ok(Self {
            duration: p(store, "adapter.duration")?,
            pitch: p(store, "adapter.pitch")?,
            energy: p(store, "adapter.energy")?,
            pitch_embedding: Embedding::new(store, "adapter.pitch_embedding", cfg.pitch_bins, cfg.adapter_dim, cfg.seed)?,
            energy_embedding: Embedding::new(
                store,
                "adapter.energy_embedding",
                cfg.pitch_bins,
                cfg.adapter_dim,
                cfg.seed,
            )?,
            pitch_quantizer: Quantizer::new(cfg.pitch_min, cfg.pitch_max, cfg.pitch_bins),
            energy_quantizer: Quantizer::new(cfg.energy_min, cfg.energy_max, cfg.pitch_bins),
        })
    }

    fn frame_ids(&self, quantizer: &Quantizer, values: &[f64], keep: &[bool]) -> Vec<usize> {
        values
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { quantizer.bucket(v) } else { 0 })
            .collect()
    }

    fn target_frames(values: &[Vec<f64>], b: usize, t: usize) -> Result<Vec<f64>> {
        let mut flat = vec![0.0; b * t];
        for (bi, v) in values.iter().enumerate() {
            if v.len() > t {
                return Err(Error::Dimension(format!(
                    "variance target has {} frames, expanded sequence has {t}",
                    v.len()
                )));
            }
            flat[bi * t..bi * t + v.len()].copy_from_slice(v);
        }
        Ok(flat)
    }

    /// In [`Mode::Train`] `targets` is required and drives expansion and the
    /// added embeddings. In [`Mode::Infer`] predictions are used, except that
    /// `durations` may force the expansion (teacher-forced evaluation).
    pub fn forward(
        &self,
        g: &mut Graph,
        h: Var,
        phoneme_mask: &[bool],
        targets: Option<VarianceTargets<'_>>,
        mode: Mode,
        durations: DurationSource<'_>,
    ) -> Result<AdapterOutput> {
        let b = g.shape(h)[0];
        let l = g.shape(h)[1];
        let log_duration = self.duration.forward(g, h, phoneme_mask)?;

        let targets = match (mode, targets) {
            (Mode::Train, None) => {
                return Err(Error::Usage("train mode requires variance targets".into()))
            }
            (Mode::Train, Some(t)) => Some(t),
            (Mode::Infer, _) => None,
        };

        let chosen: Vec<Vec<usize>> = match (targets, durations) {
            (Some(t), _) => t.durations.to_vec(),
            (None, DurationSource::Given(d)) => d.to_vec(),
            (None, DurationSource::Predicted) => {
                let pred = g.value(log_duration).data();
                (0..b)
                    .map(|bi| {
                        (0..l)
                            .filter(|&i| phoneme_mask[bi * l + i])
                            .map(|i| round_duration(pred[bi * l + i]))
                            .collect()
                    })
                    .collect()
            }
        };

        let (mut x, frame_mask) = length_regulate(g, h, &chosen)?;
        let frames = if b == 0 { 0 } else { frame_mask.len() / b };

        let pitch = self.pitch.forward(g, x, &frame_mask)?;
        let pitch_values = match targets {
            Some(t) => Self::target_frames(t.pitch, b, frames)?,
            None => g.value(pitch).data().to_vec(),
        };
        let ids = self.frame_ids(&self.pitch_quantizer, &pitch_values, &frame_mask);
        let emb = self.pitch_embedding.forward(g, &ids, &[b, frames])?;
        let emb = g.mask_rows(emb, &frame_mask)?;
        x = g.add(x, emb)?;

        let energy = self.energy.forward(g, x, &frame_mask)?;
        let energy_values = match targets {
            Some(t) => Self::target_frames(t.energy, b, frames)?,
            None => g.value(energy).data().to_vec(),
        };
        let ids = self.frame_ids(&self.energy_quantizer, &energy_values, &frame_mask);
        let emb = self.energy_embedding.forward(g, &ids, &[b, frames])?;
        let emb = g.mask_rows(emb, &frame_mask)?;
        x = g.add(x, emb)?;

        Ok(AdapterOutput {
            hidden: x,
            log_duration,
            pitch,
            energy,
            durations: chosen,
            frames,
            frame_mask,
        })
    }
}

/// FFT blocks at the decoder width, then a projection to mel bins.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<FftBlock>,
    pub mel_out: Linear,
    pub width: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let width = cfg.decoder_width();
        let dims = FftBlockDims {
            dim: width,
            heads: cfg.decoder_heads(),
            ffn_dim: cfg.decoder_ffn_dim(),
            kernel: cfg.conv_kernel,
            dropout: cfg.dropout,
        };
        Ok(Self {
            blocks: block_stack(store, "decoder", cfg.decoder_layers, &dims, cfg.seed)?,
            mel_out: Linear::new(store, "decoder.mel_out", width, cfg.n_mels, cfg.seed)?,
            width,
        })
    }

    /// `[B, T, width]` to `[B, T, n_mels]`; positions are re-added at the input.
    pub fn forward(&self, g: &mut Graph, x: Var, frame_mask: &[bool]) -> Result<Var> {
        let w = g.shape(x)[2];
        if w != self.width {
            return Err(Error::Dimension(format!(
                "decoder expects width {}, got {w}",
                self.width
            )));
        }
        let x = add_positions(g, x)?;
        let x = run_blocks(g, &self.blocks, x, frame_mask)?;
        let mel = self.mel_out.forward(g, x)?;
        g.mask_rows(mel, frame_mask)
    }
}

/// Scalar loss nodes of the baseline objective.
#[derive(Debug, Clone, Copy)]
pub struct Fs2Terms {
    pub mel: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
}

/// L1 on mel, MSE on log-duration, pitch and energy; means over unpadded
/// elements. Requires the output frame grid to match the batch targets.
pub fn fs2_loss(
    g: &mut Graph,
    mel: Var,
    log_duration: Var,
    pitch: Var,
    energy: Var,
    batch: &Batch,
) -> Result<Fs2Terms> {
    let mel_target = batch
        .mel
        .as_ref()
        .ok_or_else(|| Error::Usage("loss needs mel targets".into()))?;
    if g.shape(mel) != mel_target.shape() {
        return Err(Error::Dimension(format!(
            "mel prediction {:?} vs target {:?}",
            g.shape(mel),
            mel_target.shape()
        )));
    }
    let mel_l = g.masked_l1(mel, mel_target, &batch.frame_mask)?;
    let dur_l = g.masked_mse(log_duration, &batch.log_durations(), &batch.phoneme_mask)?;
    let pitch_l = g.masked_mse(pitch, &batch.frame_values(&batch.pitch), &batch.frame_mask)?;
    let energy_l = g.masked_mse(energy, &batch.frame_values(&batch.energy), &batch.frame_mask)?;
    Ok(Fs2Terms {
        mel: mel_l,
        duration: dur_l,
        pitch: pitch_l,
        energy: energy_l,
    })
}
