//! The full acoustic model in its three variants.
//!
//! Both SALTTS variants pass the variance-adapter output through a two-layer
//! projector (adapter width to SSL width) and an SSL predictor made of FFT
//! blocks, whose output is regressed onto repeater-aligned SSL features with
//! an L1 loss:
//!
//! * **parallel**: the mel decoder still reads the adapter output; the branch
//!   only contributes the auxiliary loss and is skipped at inference;
//! * **cascade**: the decoder runs at the SSL width on
//!   `ssl_predictor(P) + P`, where `P` is the projector output; the loss
//!   uses the predictor output before that residual sum.

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::fastspeech2::{
    fs2_loss, run_blocks, Decoder, DurationSource, Encoder, Mode, VarianceAdapter, VarianceTargets,
};
use crate::matrix::Matrix;
use crate::nn::layers::{FftBlock, FftBlockDims, Linear};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

/// Per-term losses and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.mel, self.duration, self.pitch, self.energy, self.aux, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `affine -> ReLU -> affine`, adapter width to SSL width.
#[derive(Debug, Clone)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, "projector.fc1", cfg.adapter_dim, cfg.projector_hidden, cfg.seed)?,
            fc2: Linear::new(store, "projector.fc2", cfg.projector_hidden, cfg.ssl_dim, cfg.seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, frame_mask: &[bool]) -> Result<Var> {
        let w = g.shape(x)[2];
        if w != self.fc1.d_in {
            return Err(Error::Dimension(format!(
                "projector expects width {}, got {w}",
                self.fc1.d_in
            )));
        }
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        let p = self.fc2.forward(g, h)?;
        g.mask_rows(p, frame_mask)
    }
}

/// Stack of FFT blocks at the SSL width.
#[derive(Debug, Clone)]
pub struct SslPredictor {
    pub blocks: Vec<FftBlock>,
    pub width: usize,
}

impl SslPredictor {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let dims = FftBlockDims {
            dim: cfg.ssl_dim,
            heads: cfg.ssl_heads,
            ffn_dim: cfg.ssl_ffn_dim,
            kernel: cfg.conv_kernel,
            dropout: cfg.dropout,
        };
        let blocks = (0..cfg.ssl_predictor_layers)
            .map(|i| FftBlock::new(store, &format!("ssl_predictor.block{i}"), &dims, cfg.seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            width: cfg.ssl_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Var, frame_mask: &[bool]) -> Result<Var> {
        let w = g.shape(p)[2];
        if w != self.width {
            return Err(Error::Dimension(format!(
                "SSL predictor expects width {}, got {w}",
                self.width
            )));
        }
        run_blocks(g, &self.blocks, p, frame_mask)
    }
}

/// Mean absolute error between predicted and aligned SSL features over
/// unpadded `(frame, dim)` cells.
pub fn aux_loss(g: &mut Graph, ssl_hat: Var, target: &Tensor, frame_mask: &[bool]) -> Result<Var> {
    let shape = g.shape(ssl_hat);
    if shape != target.shape() {
        return Err(Error::Alignment(format!(
            "SSL prediction {shape:?} vs aligned target {:?}; the repeater output must match the mel frame count",
            target.shape()
        )));
    }
    g.masked_l1(ssl_hat, target, frame_mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Cascade only: add the projector output to the predictor output at the
    /// decoder input.
    pub cascade_residual: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            cascade_residual: true,
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub mel: Var,
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
    /// Adapter output, `[B, T, adapter_dim]`.
    pub hidden: Var,
    /// Projector output `P`, when the branch ran.
    pub projected: Option<Var>,
    /// SSL predictor output, when the branch ran.
    pub ssl_hat: Option<Var>,
    pub decoder_input: Var,
    pub durations: Vec<Vec<usize>>,
    pub frames: usize,
    pub frame_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SslBranch {
    pub projector: Projector,
    pub predictor: SslPredictor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub encoder: Encoder,
    pub adapter: VarianceAdapter,
    pub decoder: Decoder,
    pub branch: Option<SslBranch>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config)?;
        let adapter = VarianceAdapter::new(&mut store, &config)?;
        let decoder = Decoder::new(&mut store, &config)?;
        let branch = if config.variant.has_ssl_branch() {
            Some(SslBranch {
                projector: Projector::new(&mut store, &config)?,
                predictor: SslPredictor::new(&mut store, &config)?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            encoder,
            adapter,
            decoder,
            branch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters reachable from the inference graph of this variant.
    pub fn inference_parameters(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .zip(self.store.ids())
            .filter(|(p, _)| {
                let branch = p.name.starts_with("projector.") || p.name.starts_with("ssl_predictor.");
                !branch || self.variant() == Variant::Cascade
            })
            .map(|(_, id)| id)
            .collect()
    }

    pub fn inference_parameter_count(&self) -> usize {
        self.inference_parameters()
            .into_iter()
            .map(|id| self.store.value(id).numel())
            .sum()
    }

    /// Parameters of the projector and SSL predictor.
    pub fn branch_parameters(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .zip(self.store.ids())
            .filter(|(p, _)| p.name.starts_with("projector.") || p.name.starts_with("ssl_predictor."))
            .map(|(_, id)| id)
            .collect()
    }

    pub fn parameters_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.store
            .iter()
            .zip(self.store.ids())
            .filter(|(p, _)| p.name.starts_with(prefix))
            .map(|(_, id)| id)
            .collect()
    }

    fn encode_and_adapt(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        durations: DurationSource<'_>,
    ) -> Result<crate::fastspeech2::AdapterOutput> {
        for &id in &batch.phonemes {
            if id >= self.config.vocab_size {
                return Err(Error::Index(format!(
                    "phoneme id {id} >= vocabulary size {}",
                    self.config.vocab_size
                )));
            }
        }
        let h = self
            .encoder
            .forward(g, &batch.phonemes, batch.size, batch.max_phonemes, &batch.phoneme_mask)?;
        self.adapter.forward(
            g,
            h,
            &batch.phoneme_mask,
            VarianceTargets::from_batch(batch),
            mode,
            durations,
        )
    }

    fn branch(&self) -> Result<&SslBranch> {
        self.branch
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} variant has no SSL branch", self.variant())))
    }

    fn expect_variant(&self, v: Variant) -> Result<()> {
        if self.variant() != v {
            return Err(Error::Config(format!(
                "model is {}, operation needs {v}",
                self.variant()
            )));
        }
        Ok(())
    }

    fn assemble(
        adapted: crate::fastspeech2::AdapterOutput,
        mel: Var,
        decoder_input: Var,
        projected: Option<Var>,
        ssl_hat: Option<Var>,
    ) -> ForwardOutput {
        ForwardOutput {
            mel,
            log_duration: adapted.log_duration,
            pitch: adapted.pitch,
            energy: adapted.energy,
            hidden: adapted.hidden,
            projected,
            ssl_hat,
            decoder_input,
            durations: adapted.durations,
            frames: adapted.frames,
            frame_mask: adapted.frame_mask,
        }
    }

    pub fn forward_baseline(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        durations: DurationSource<'_>,
    ) -> Result<ForwardOutput> {
        self.expect_variant(Variant::Baseline)?;
        let a = self.encode_and_adapt(g, batch, mode, durations)?;
        let mel = self.decoder.forward(g, a.hidden, &a.frame_mask)?;
        let hidden = a.hidden;
        Ok(Self::assemble(a, mel, hidden, None, None))
    }

    /// Decoder reads the adapter output; the SSL branch runs in train mode only.
    pub fn forward_parallel(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        durations: DurationSource<'_>,
    ) -> Result<ForwardOutput> {
        self.expect_variant(Variant::Parallel)?;
        let a = self.encode_and_adapt(g, batch, mode, durations)?;
        let mel = self.decoder.forward(g, a.hidden, &a.frame_mask)?;
        let (mut projected, mut ssl_hat) = (None, None);
        if mode == Mode::Train {
            let br = self.branch()?;
            let p = br.projector.forward(g, a.hidden, &a.frame_mask)?;
            let s = br.predictor.forward(g, p, &a.frame_mask)?;
            projected = Some(p);
            ssl_hat = Some(s);
        }
        let hidden = a.hidden;
        Ok(Self::assemble(a, mel, hidden, projected, ssl_hat))
    }

    /// Decoder reads `ssl_hat + P` at the SSL width, in both modes.
    pub fn forward_cascade(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        durations: DurationSource<'_>,
        options: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.expect_variant(Variant::Cascade)?;
        let a = self.encode_and_adapt(g, batch, mode, durations)?;
        let br = self.branch()?;
        let p = br.projector.forward(g, a.hidden, &a.frame_mask)?;
        let s = br.predictor.forward(g, p, &a.frame_mask)?;
        let decoder_input = if options.cascade_residual { g.add(s, p)? } else { s };
        let mel = self.decoder.forward(g, decoder_input, &a.frame_mask)?;
        Ok(Self::assemble(a, mel, decoder_input, Some(p), Some(s)))
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
        self.forward_with(g, batch, mode, DurationSource::Predicted, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        durations: DurationSource<'_>,
        options: ForwardOptions,
    ) -> Result<ForwardOutput> {
        match self.variant() {
            Variant::Baseline => self.forward_baseline(g, batch, mode, durations),
            Variant::Parallel => self.forward_parallel(g, batch, mode, durations),
            Variant::Cascade => self.forward_cascade(g, batch, mode, durations, options),
        }
    }

    /// Weighted training objective. The aux term is zero for the baseline and
    /// whenever the SSL branch did not run.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, batch: &Batch) -> Result<(Var, LossBreakdown)> {
        let terms = fs2_loss(g, out.mel, out.log_duration, out.pitch, out.energy, batch)?;
        let c = &self.config;
        let aux = match out.ssl_hat {
            Some(s) if self.variant().has_ssl_branch() => {
                let target = batch
                    .ssl
                    .as_ref()
                    .ok_or_else(|| Error::Usage(format!("{} training needs SSL targets", self.variant())))?;
                Some(aux_loss(g, s, target, &batch.frame_mask)?)
            }
            _ => None,
        };
        let mut weighted = vec![
            (terms.mel, c.w_mel),
            (terms.duration, c.w_dur),
            (terms.pitch, c.w_pitch),
            (terms.energy, c.w_energy),
        ];
        if let Some(a) = aux {
            weighted.push((a, c.w_aux));
        }
        let total = g.weighted_sum(&weighted)?;
        let v = |x: Var| g.value(x).data()[0];
        let breakdown = LossBreakdown {
            mel: v(terms.mel),
            duration: v(terms.duration),
            pitch: v(terms.pitch),
            energy: v(terms.energy),
            aux: aux.map_or(0.0, v),
            total: v(total),
        };
        Ok((total, breakdown))
    }

    /// Plain-arithmetic loss terms with no finiteness checks, used to report
    /// which term diverged.
    pub fn loss_values_unchecked(&self, g: &Graph, out: &ForwardOutput, batch: &Batch) -> LossBreakdown {
        fn masked(pred: &[f64], target: &[f64], keep: &[bool], l1: bool) -> f64 {
            let width = if keep.is_empty() { 1 } else { pred.len() / keep.len() };
            let (mut sum, mut n) = (0.0, 0usize);
            for (row, &k) in keep.iter().enumerate() {
                if k {
                    for c in 0..width {
                        let d = pred[row * width + c] - target.get(row * width + c).copied().unwrap_or(0.0);
                        sum += if l1 { d.abs() } else { d * d };
                        n += 1;
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        }
        let c = &self.config;
        let v = |x: Var| g.value(x).data();
        let mel = batch.mel.as_ref().map_or(f64::NAN, |t| masked(v(out.mel), t.data(), &batch.frame_mask, true));
        let duration = masked(v(out.log_duration), batch.log_durations().data(), &batch.phoneme_mask, false);
        let pitch = masked(v(out.pitch), batch.frame_values(&batch.pitch).data(), &batch.frame_mask, false);
        let energy = masked(v(out.energy), batch.frame_values(&batch.energy).data(), &batch.frame_mask, false);
        let aux = match (out.ssl_hat, &batch.ssl) {
            (Some(s), Some(t)) => masked(v(s), t.data(), &batch.frame_mask, true),
            _ => 0.0,
        };
        LossBreakdown {
            mel,
            duration,
            pitch,
            energy,
            aux,
            total: c.w_mel * mel + c.w_dur * duration + c.w_pitch * pitch + c.w_energy * energy + c.w_aux * aux,
        }
    }

    /// Inference-mode mel per item, trimmed to its own frame count.
    pub fn synthesize_batch(&self, batch: &Batch, durations: DurationSource<'_>) -> Result<Vec<Matrix>> {
        let mut g = Graph::new(&self.store);
        let out = self.forward_with(&mut g, batch, Mode::Infer, durations, ForwardOptions::default())?;
        let mel = g.value(out.mel);
        let n_mels = self.config.n_mels;
        let t = out.frames;
        out.durations
            .iter()
            .enumerate()
            .map(|(b, d)| {
                let frames: usize = d.iter().sum();
                let start = b * t * n_mels;
                Matrix::new(frames, n_mels, mel.data()[start..start + frames * n_mels].to_vec())
            })
            .collect()
    }
}

/// Number of parameters in the inference graph of a freshly built model.
pub fn count_inference_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(Model::new(config.clone())?.inference_parameter_count())
}
