//! Objective metrics: mel-cepstral distortion and log-F0 RMSE.
//!
//! Mel matrices are log-mel already. A frame's cepstrum is the orthonormal
//! DCT-II of its row; coefficient 0 is dropped and coefficients `1..=K` are
//! kept, `K = min(13, n_mels - 1)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::fastspeech2::{DurationSource, Mode};
use crate::features::Utterance;
use crate::matrix::Matrix;
use crate::nn::Graph;
use crate::saltts::Model;

pub const CEPSTRAL_COEFFICIENTS: usize = 13;

/// `10 * sqrt(2) / ln 10`.
pub fn mcd_constant() -> f64 {
    10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10
}

pub fn retained_coefficients(n_mels: usize) -> usize {
    CEPSTRAL_COEFFICIENTS.min(n_mels.saturating_sub(1))
}

/// Coefficients `1..=k` of the orthonormal DCT-II of `row`.
pub fn cepstrum(row: &[f64], k: usize) -> Vec<f64> {
    let n = row.len() as f64;
    let scale = (2.0 / n).sqrt();
    (1..=k)
        .map(|q| {
            scale
                * row
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * (std::f64::consts::PI * q as f64 * (i as f64 + 0.5) / n).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Mean MCD over frames between cepstra given directly.
pub fn mcd_from_cepstra(reference: &[Vec<f64>], synthesized: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != synthesized.len() || reference.iter().zip(synthesized).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Dimension("cepstral sequences differ in shape".into()));
    }
    if reference.is_empty() {
        return Err(Error::Argument("MCD of an empty sequence".into()));
    }
    let total: f64 = reference
        .iter()
        .zip(synthesized)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum();
    Ok(mcd_constant() * total / reference.len() as f64)
}

pub fn mcd(reference: &Matrix, synthesized: &Matrix) -> Result<f64> {
    if reference.rows() != synthesized.rows() || reference.cols() != synthesized.cols() {
        return Err(Error::Dimension(format!(
            "MCD needs equal shapes, got [{}, {}] and [{}, {}]",
            reference.rows(),
            reference.cols(),
            synthesized.rows(),
            synthesized.cols()
        )));
    }
    let k = retained_coefficients(reference.cols());
    let ceps = |m: &Matrix| (0..m.rows()).map(|r| cepstrum(m.row(r), k)).collect::<Vec<_>>();
    mcd_from_cepstra(&ceps(reference), &ceps(synthesized))
}

/// RMSE over frames voiced (`> 0`) in both contours; `None` without any.
pub fn log_f0_rmse(reference: &[f64], synthesized: &[f64]) -> Result<Option<f64>> {
    if reference.len() != synthesized.len() {
        return Err(Error::Dimension(format!(
            "log-F0 contours have {} and {} frames",
            reference.len(),
            synthesized.len()
        )));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (&a, &b) in reference.iter().zip(synthesized) {
        if a > 0.0 && b > 0.0 {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok((n > 0).then(|| (sum / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub frames: usize,
    pub mcd: f64,
    pub log_f0_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Aggregate {
        mean,
        std: var.sqrt(),
        count: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mcd(&self) -> Option<Aggregate> {
        aggregate(&self.rows.iter().map(|r| r.mcd).collect::<Vec<_>>())
    }

    pub fn log_f0_rmse(&self) -> Option<Aggregate> {
        aggregate(&self.rows.iter().filter_map(|r| r.log_f0_rmse).collect::<Vec<_>>())
    }

    /// One line per utterance; an absent log-F0 RMSE is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,frames,mcd,log_f0_rmse\n");
        for r in &self.rows {
            let f0 = r.log_f0_rmse.map_or(String::new(), |v| v.to_string());
            writeln!(out, "{},{},{},{f0}", r.id, r.frames, r.mcd).expect("string write");
        }
        out
    }

    /// Fixed-width table with one row per system.
    pub fn summary_table(&self) -> String {
        let fmt = |a: Option<Aggregate>| a.map_or("n/a".to_string(), |a| format!("{:.4} ± {:.4}", a.mean, a.std));
        let mut out = String::new();
        writeln!(out, "{:<20} {:>22} {:>22} {:>6}", "Model", "MCD", "F0 RMSE", "N").unwrap();
        writeln!(
            out,
            "{:<20} {:>22} {:>22} {:>6}",
            self.label,
            fmt(self.mcd()),
            fmt(self.log_f0_rmse()),
            self.rows.len()
        )
        .unwrap();
        out
    }
}

/// Synthesised mel and pitch for one utterance with its ground-truth
/// durations.
pub fn teacher_forced(model: &Model, utt: &Utterance) -> Result<(Matrix, Vec<f64>)> {
    let batch = Batch::phonemes_only(std::slice::from_ref(&utt.phonemes));
    let durations = vec![utt.durations.clone()];
    let mut g = Graph::new(model.store());
    let out = model.forward_with(
        &mut g,
        &batch,
        Mode::Infer,
        DurationSource::Given(&durations),
        Default::default(),
    )?;
    let t = utt.frames();
    let n_mels = model.config().n_mels;
    let mel = Matrix::new(t, n_mels, g.value(out.mel).data()[..t * n_mels].to_vec())?;
    Ok((mel, g.value(out.pitch).data()[..t].to_vec()))
}

/// Teacher-forced evaluation of `model` on `utterances`.
pub fn evaluate(model: &Model, utterances: &[&Utterance], label: &str) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let rows = utterances
        .iter()
        .map(|u| {
            let (mel, pitch) = teacher_forced(model, u)?;
            Ok(EvalRow {
                id: u.id.clone(),
                frames: u.frames(),
                mcd: mcd(&u.mel, &mel)?,
                log_f0_rmse: log_f0_rmse(&u.pitch, &pitch)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        label: label.to_string(),
        rows,
    })
}

/// Report of the corpus targets against themselves.
pub fn evaluate_targets(utterances: &[&Utterance]) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let rows = utterances
        .iter()
        .map(|u| {
            Ok(EvalRow {
                id: u.id.clone(),
                frames: u.frames(),
                mcd: mcd(&u.mel, &u.mel)?,
                log_f0_rmse: log_f0_rmse(&u.pitch, &u.pitch)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        label: "targets".into(),
        rows,
    })
}

/// Binary PPM: time on the x axis, the lowest mel bin on the bottom row,
/// greyscale normalised to the matrix range.
pub fn encode_ppm(mel: &Matrix) -> Vec<u8> {
    let (w, h) = (mel.rows(), mel.cols());
    let (lo, hi) = mel
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            let g = (((mel.get(x, y) - lo) / span) * 255.0).round() as u8;
            out.extend_from_slice(&[g, g, g]);
        }
    }
    out
}

pub fn write_ppm(path: &Path, mel: &Matrix) -> Result<()> {
    fs::write(path, encode_ppm(mel)).map_err(|e| Error::io(path, e))
}
