//! Browser bindings for three interactive views: the warmup learning-rate
//! curve, the SSL-to-acoustic frame repeater and MCD under additive noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use saltts::align::{build_schedule_with, FrameSpec, NoisePlacement};
use saltts::config::TrainConfig;
use saltts::eval::mcd;
use saltts::train::learning_rate;
use saltts::Matrix;
use wasm_bindgen::prelude::*;

/// Learning rate at steps `1..=steps`.
#[wasm_bindgen]
pub fn lr_curve(base: f64, warmup: usize, steps: usize) -> Vec<f64> {
    let cfg = TrainConfig {
        learning_rate: base,
        warmup_steps: warmup.max(1),
        ..TrainConfig::default()
    };
    (1..=steps as u64).map(|s| learning_rate(&cfg, s)).collect()
}

/// Schedule for `n_src` SSL frames as JSON:
/// `{"dst_len": n, "src": [...], "noise": [...]}`.
#[wasm_bindgen]
pub fn repeater_schedule(n_src: usize, noise_both_repeats: bool) -> String {
    let placement = if noise_both_repeats {
        NoisePlacement::BothRepeats
    } else {
        NoisePlacement::SecondRepeat
    };
    let s = build_schedule_with(n_src, &FrameSpec::SSL, &FrameSpec::FS2, placement);
    serde_json::json!({
        "dst_len": s.dst_len(),
        "src": s.src_indices(),
        "noise": s.entries().iter().map(|e| e.add_noise).collect::<Vec<_>>(),
    })
    .to_string()
}

/// MCD between a random log-mel spectrogram and a copy with Gaussian noise
/// of standard deviation `sigma` added to every bin.
pub fn noisy_mcd(n_mels: usize, frames: usize, sigma: f64, seed: u64) -> Result<f64, String> {
    if n_mels < 2 || frames == 0 {
        return Err("need at least 2 mel bins and 1 frame".into());
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(format!("noise level must be a non-negative number, got {sigma}"));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| format!("noise level: {e}"))?;
    let level = Uniform::new(-6.0, 2.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean: Vec<f64> = (0..n_mels * frames).map(|_| level.sample(&mut rng)).collect();
    let noisy: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
    let a = Matrix::new(frames, n_mels, clean).map_err(|e| e.to_string())?;
    let b = Matrix::new(frames, n_mels, noisy).map_err(|e| e.to_string())?;
    mcd(&a, &b).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn mcd_under_noise(n_mels: usize, frames: usize, sigma: f64, seed: u64) -> Result<f64, JsError> {
    noisy_mcd(n_mels, frames, sigma, seed).map_err(|e| JsError::new(&e))
}
