use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::NoisePlacement;
use crate::error::{Error, Result};

/// Which graph to build.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain FastSpeech2.
    #[default]
    Baseline,
    /// SSL branch used only for the training loss.
    Parallel,
    /// Decoder consumes the SSL predictor output plus a projector residual.
    Cascade,
}

impl Variant {
    pub fn code(self) -> u8 {
        match self {
            Variant::Baseline => 0,
            Variant::Parallel => 1,
            Variant::Cascade => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Variant::Baseline),
            1 => Some(Variant::Parallel),
            2 => Some(Variant::Cascade),
            _ => None,
        }
    }

    pub fn has_ssl_branch(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Parallel => "parallel",
            Variant::Cascade => "cascade",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "parallel" => Ok(Variant::Parallel),
            "cascade" => Ok(Variant::Cascade),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected baseline, parallel or cascade)"
            ))),
        }
    }
}

/// Dimensions, layer counts, loss weights and seeds of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub adapter_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub predictor_filter: usize,
    pub predictor_kernel: usize,
    pub n_mels: usize,
    pub ssl_dim: usize,
    pub projector_hidden: usize,
    pub ssl_predictor_layers: usize,
    pub ssl_heads: usize,
    pub ssl_ffn_dim: usize,
    pub pitch_bins: usize,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub dropout: f64,
    pub noise_sigma: f64,
    pub noise_placement: NoisePlacement,
    pub w_mel: f64,
    pub w_dur: f64,
    pub w_pitch: f64,
    pub w_energy: f64,
    pub w_aux: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            vocab_size: 64,
            adapter_dim: 384,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 2,
            ffn_dim: 1536,
            conv_kernel: 9,
            predictor_filter: 256,
            predictor_kernel: 3,
            n_mels: 80,
            ssl_dim: 768,
            projector_hidden: 768,
            ssl_predictor_layers: 4,
            ssl_heads: 2,
            ssl_ffn_dim: 1536,
            pitch_bins: 256,
            pitch_min: 0.0,
            pitch_max: 6.0,
            energy_min: 0.0,
            energy_max: 2.0,
            dropout: 0.1,
            noise_sigma: 1.0,
            noise_placement: NoisePlacement::SecondRepeat,
            w_mel: 1.0,
            w_dur: 1.0,
            w_pitch: 1.0,
            w_energy: 1.0,
            w_aux: 1.0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 12,
            adapter_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 12,
            conv_kernel: 3,
            predictor_filter: 8,
            predictor_kernel: 3,
            n_mels: 6,
            ssl_dim: 8,
            projector_hidden: 8,
            ssl_predictor_layers: 1,
            ssl_heads: 2,
            ssl_ffn_dim: 12,
            pitch_bins: 16,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn decoder_width(&self) -> usize {
        match self.variant {
            Variant::Cascade => self.ssl_dim,
            _ => self.adapter_dim,
        }
    }

    pub fn decoder_heads(&self) -> usize {
        match self.variant {
            Variant::Cascade => self.ssl_heads,
            _ => self.heads,
        }
    }

    pub fn decoder_ffn_dim(&self) -> usize {
        match self.variant {
            Variant::Cascade => self.ssl_ffn_dim,
            _ => self.ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("adapter_dim", self.adapter_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("predictor_filter", self.predictor_filter),
            ("n_mels", self.n_mels),
            ("ssl_dim", self.ssl_dim),
            ("projector_hidden", self.projector_hidden),
            ("ssl_heads", self.ssl_heads),
            ("ssl_ffn_dim", self.ssl_ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.adapter_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "adapter_dim {} is not divisible by heads {}",
                self.adapter_dim, self.heads
            )));
        }
        if !self.ssl_dim.is_multiple_of(self.ssl_heads) {
            return Err(Error::Config(format!(
                "ssl_dim {} is not divisible by ssl_heads {}",
                self.ssl_dim, self.ssl_heads
            )));
        }
        for (name, k) in [("conv_kernel", self.conv_kernel), ("predictor_kernel", self.predictor_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2 (id 0 is padding)".into()));
        }
        if self.pitch_bins < 2 {
            return Err(Error::Config("pitch_bins must be at least 2".into()));
        }
        if !(self.pitch_max >= self.pitch_min && self.energy_max >= self.energy_min) {
            return Err(Error::Config("pitch/energy ranges must satisfy min <= max".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        for (name, w) in [
            ("w_mel", self.w_mel),
            ("w_dur", self.w_dur),
            ("w_pitch", self.w_pitch),
            ("w_energy", self.w_energy),
            ("w_aux", self.w_aux),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Optimiser and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

/// Synthetic corpus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub eval_fraction: f64,
    pub mel_noise: f64,
    pub ssl_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_phonemes: 4,
            max_phonemes: 16,
            min_duration: 1,
            max_duration: 6,
            eval_fraction: 0.25,
            mel_noise: 0.05,
            ssl_noise: 0.05,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::Config("corpus phoneme-count range is empty".into()));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::Config("corpus duration range must be non-empty and start at 1 or more".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must be in [0, 1)".into()));
        }
        if !(self.mel_noise >= 0.0 && self.ssl_noise >= 0.0) {
            return Err(Error::Config("corpus noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything a command needs, as stored in a run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}
