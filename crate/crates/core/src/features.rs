//! Synthetic corpus generation, SSL target preparation and the on-disk
//! formats for features and manifests.
//!
//! A corpus directory holds `manifest.jsonl` (one header line followed by
//! one record per utterance), `mel/<id>.matf`, `ssl/<id>.sslf` and the
//! linear map used to derive the synthetic SSL features, `ssl_map.matf`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{apply_repeater, build_schedule_with, target_frame_count, FrameSpec, NoisePlacement};
use crate::batch::{Batch, BatchItem};
use crate::config::{CorpusConfig, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{site_rng, stable_hash};

pub const SSLF_MAGIC: &[u8; 4] = b"SSLF";
pub const SSLF_VERSION: u16 = 1;
pub const SSLF_HEADER_LEN: usize = 24;
pub const MATF_MAGIC: &[u8; 4] = b"MATF";
pub const MATF_VERSION: u16 = 1;
pub const MATF_HEADER_LEN: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Synthetic SSL stacks have this many transformer layers, numbered from 1.
pub const SYNTHETIC_SSL_LAYERS: usize = 12;
pub const DEFAULT_SSL_LAYERS: [usize; 3] = [9, 10, 11];

/// Fraction of the mel frame count the repeater output may miss by before
/// the features are rejected. A miss of one frame is always accepted.
pub const MAX_FRAME_MISMATCH: f64 = 0.10;

pub fn frame_mismatch_allowed(mel_frames: usize) -> usize {
    ((MAX_FRAME_MISMATCH * mel_frames as f64).floor() as usize).max(1)
}

/// SSL features of one utterance at their native frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SslFeatures {
    pub features: Matrix,
    pub frame_spec: FrameSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel: Matrix,
    pub ssl: Option<SslFeatures>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    /// Training item with the SSL target aligned to the mel grid when the
    /// variant trains the SSL branch.
    pub fn to_batch_item(&self, cfg: &ModelConfig) -> Result<BatchItem> {
        let ssl = if cfg.variant.has_ssl_branch() {
            Some(prepare_ssl_target(self, cfg)?)
        } else {
            None
        };
        Ok(BatchItem {
            id: self.id.clone(),
            phonemes: self.phonemes.clone(),
            durations: self.durations.clone(),
            pitch: self.pitch.clone(),
            energy: self.energy.clone(),
            mel: self.mel.clone(),
            ssl,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub n_mels: usize,
    pub ssl_dim: usize,
    pub vocab_size: usize,
    pub mel_frame_spec: FrameSpec,
    pub ssl_frame_spec: FrameSpec,
    pub seed: u64,
    pub ssl_layers: Vec<usize>,
    /// Relative path of the `[n_mels, ssl_dim]` map behind the synthetic
    /// SSL features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_map: Option<String>,
}

/// One utterance line. Feature-only fragments carry just `id` and `ssl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phonemes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Utterance(UtteranceRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<UtteranceRecord>,
}

fn parse_lines(text: &str) -> Result<Vec<ManifestLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1))))
        .collect()
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        for line in parse_lines(text)? {
            match line {
                ManifestLine::Header(h) if header.is_none() => header = Some(h),
                ManifestLine::Header(_) => return Err(Error::Data("manifest has more than one header".into())),
                ManifestLine::Utterance(r) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| Error::Data("manifest has no header line".into()))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                header.version
            )));
        }
        Ok(Self { header, records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: ManifestLine| {
            out.push_str(&serde_json::to_string(&line).expect("manifest lines serialize"));
            out.push('\n');
        };
        push(ManifestLine::Header(self.header.clone()));
        for r in &self.records {
            push(ManifestLine::Utterance(r.clone()));
        }
        out
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    /// Replaces SSL paths by id with those of a feature-only fragment.
    /// Returns how many records were updated.
    pub fn merge_fragment(&mut self, fragment: &[UtteranceRecord]) -> Result<usize> {
        let mut n = 0;
        for f in fragment {
            let ssl = f
                .ssl
                .clone()
                .ok_or_else(|| Error::Data(format!("fragment record {} has no ssl path", f.id)))?;
            let rec = self
                .records
                .iter_mut()
                .find(|r| r.id == f.id)
                .ok_or_else(|| Error::Data(format!("fragment id {} is not in the manifest", f.id)))?;
            rec.ssl = Some(ssl);
            n += 1;
        }
        Ok(n)
    }
}

/// Utterance records of a fragment; an optional header line is ignored.
pub fn parse_fragment(text: &str) -> Result<Vec<UtteranceRecord>> {
    Ok(parse_lines(text)?
        .into_iter()
        .filter_map(|l| match l {
            ManifestLine::Utterance(r) => Some(r),
            ManifestLine::Header(_) => None,
        })
        .collect())
}

// ---- binary formats --------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, {available} available, missing {}", n - available),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn read_payload(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let n = rows * cols;
    let start = r.pos;
    let raw = r.take(n * 4, "payload")?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: start + 4 * i,
            message: "non-finite value in payload".into(),
        });
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes after payload", r.bytes.len() - r.pos),
        });
    }
    Ok(values)
}

fn push_payload(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_sslf(f: &SslFeatures) -> Result<Vec<u8>> {
    let dim = u16::try_from(f.features.cols())
        .map_err(|_| Error::Argument(format!("ssl_dim {} does not fit in u16", f.features.cols())))?;
    let frames = u32::try_from(f.features.rows())
        .map_err(|_| Error::Argument(format!("{} frames do not fit in u32", f.features.rows())))?;
    let mut out = Vec::with_capacity(SSLF_HEADER_LEN + 4 * f.features.data().len());
    out.extend_from_slice(SSLF_MAGIC);
    out.extend_from_slice(&SSLF_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&f.frame_spec.sample_rate.to_le_bytes());
    out.extend_from_slice(&(f.frame_spec.window_ms as f32).to_le_bytes());
    out.extend_from_slice(&(f.frame_spec.hop_ms as f32).to_le_bytes());
    push_payload(&mut out, &f.features);
    Ok(out)
}

/// Parses SSLF bytes. `expected_dim` rejects files of another width.
pub fn decode_sslf(bytes: &[u8], expected_dim: Option<usize>) -> Result<SslFeatures> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != SSLF_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"SSLF\""),
        });
    }
    let version = r.u16("version")?;
    if version != SSLF_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let dim = r.u16("ssl_dim")? as usize;
    if dim == 0 || expected_dim.is_some_and(|d| d != dim) {
        return Err(Error::Format {
            offset: 6,
            message: format!("ssl_dim {dim} does not match expected {}", expected_dim.unwrap_or(0)),
        });
    }
    let frames = r.u32("n_frames")? as usize;
    let sample_rate = r.u32("sample_rate")?;
    let window_ms = r.f32("window_ms")? as f64;
    let hop_ms = r.f32("hop_ms")? as f64;
    let frame_spec = FrameSpec::new(sample_rate, window_ms, hop_ms).map_err(|e| Error::Format {
        offset: 12,
        message: format!("invalid frame spec: {e}"),
    })?;
    let data = read_payload(&mut r, frames, dim)?;
    Ok(SslFeatures {
        features: Matrix::new(frames, dim, data)?,
        frame_spec,
    })
}

pub fn write_ssl_features(path: &Path, f: &SslFeatures) -> Result<()> {
    fs::write(path, encode_sslf(f)?).map_err(|e| Error::io(path, e))
}

pub fn load_ssl_features(path: &Path, expected_dim: Option<usize>) -> Result<SslFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sslf(&bytes, expected_dim)
}

pub fn encode_matf(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Argument("too many rows for MATF".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Argument("too many columns for MATF".into()))?;
    let mut out = Vec::with_capacity(MATF_HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(MATF_MAGIC);
    out.extend_from_slice(&MATF_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    push_payload(&mut out, m);
    Ok(out)
}

pub fn decode_matf(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MATF_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"MATF\""),
        });
    }
    let version = r.u16("version")?;
    if version != MATF_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    r.u16("reserved")?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let data = read_payload(&mut r, rows, cols)?;
    Matrix::new(rows, cols, data)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_matf(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matf(&bytes)
}

// ---- SSL target preparation ------------------------------------------------

/// Mean of the selected layers of a stack numbered from 1.
pub fn average_layers(stack: &[Matrix], layers: &[usize]) -> Result<Matrix> {
    if layers.is_empty() {
        return Err(Error::Argument("no layers selected".into()));
    }
    let first = stack
        .first()
        .ok_or_else(|| Error::Argument("empty layer stack".into()))?;
    if let Some(m) = stack.iter().find(|m| m.rows() != first.rows() || m.cols() != first.cols()) {
        return Err(Error::Dimension(format!(
            "layer shapes differ: [{}, {}] vs [{}, {}]",
            first.rows(),
            first.cols(),
            m.rows(),
            m.cols()
        )));
    }
    let mut sum = vec![0.0; first.data().len()];
    for &l in layers {
        if l == 0 || l > stack.len() {
            return Err(Error::Argument(format!(
                "layer {l} is outside 1..={} (layers are numbered from 1)",
                stack.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(stack[l - 1].data()) {
            *s += v;
        }
    }
    let n = layers.len() as f64;
    Matrix::new(first.rows(), first.cols(), sum.into_iter().map(|s| s / n).collect())
}

fn utterance_seed(seed: u64, id: &str) -> u64 {
    seed ^ stable_hash(id.as_bytes())
}

/// Repeats SSL frames onto the mel grid and clamps the result to exactly
/// the mel frame count.
pub fn prepare_ssl_target(utt: &Utterance, cfg: &ModelConfig) -> Result<Matrix> {
    prepare_ssl_target_with(utt, cfg.noise_sigma, cfg.noise_placement, cfg.seed, cfg.ssl_dim)
}

pub fn prepare_ssl_target_with(
    utt: &Utterance,
    noise_sigma: f64,
    placement: NoisePlacement,
    seed: u64,
    ssl_dim: usize,
) -> Result<Matrix> {
    let ssl = utt
        .ssl
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("{}: no SSL features", utt.id)))?;
    if ssl.features.cols() != ssl_dim {
        return Err(Error::Data(format!(
            "{}: SSL features are {}-dimensional, config expects {ssl_dim}",
            utt.id,
            ssl.features.cols()
        )));
    }
    let t = utt.frames();
    let schedule = build_schedule_with(ssl.features.rows(), &ssl.frame_spec, &FrameSpec::FS2, placement);
    if schedule.dst_len().abs_diff(t) > frame_mismatch_allowed(t) {
        return Err(Error::Data(format!(
            "{}: {} SSL frames align to {} mel frames but the utterance has {t}",
            utt.id,
            ssl.features.rows(),
            schedule.dst_len()
        )));
    }
    let aligned = apply_repeater(&ssl.features, &schedule, noise_sigma, utterance_seed(seed, &utt.id))?;
    Ok(aligned.fit_rows(t))
}

// ---- synthetic corpus ------------------------------------------------------

/// SSL frame count whose aligned length is closest to `mel_frames`.
pub fn ssl_frames_for(mel_frames: usize) -> usize {
    (1..=mel_frames.max(1))
        .min_by_key(|&n| target_frame_count(&FrameSpec::SSL, &FrameSpec::FS2, n).abs_diff(mel_frames))
        .unwrap_or(1)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Log-F0 of frame `k` within a phoneme, zero when unvoiced.
pub fn synthetic_pitch(phoneme: usize, k: usize) -> f64 {
    if phoneme.is_multiple_of(5) {
        0.0
    } else {
        4.6 + 0.05 * ((phoneme * 7) % 10) as f64 + 0.01 * k as f64
    }
}

pub fn synthetic_energy(phoneme: usize, k: usize) -> f64 {
    0.4 + 0.15 * (phoneme % 8) as f64 - 0.02 * k.min(5) as f64
}

/// In-memory corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: ManifestHeader,
    pub utterances: Vec<Utterance>,
    pub splits: Vec<Split>,
    pub ssl_map: Option<Matrix>,
}

impl Corpus {
    pub fn split(&self, which: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(u, _)| u)
            .collect()
    }

    pub fn all(&self) -> Vec<&Utterance> {
        self.utterances.iter().collect()
    }

    /// Writes blobs and `manifest.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        for sub in ["mel", "ssl"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut header = self.header.clone();
        if let Some(map) = &self.ssl_map {
            write_matrix(&dir.join("ssl_map.matf"), map)?;
            header.ssl_map = Some("ssl_map.matf".into());
        }
        let mut records = Vec::with_capacity(self.utterances.len());
        for (u, split) in self.utterances.iter().zip(&self.splits) {
            let mel_rel = format!("mel/{}.matf", u.id);
            write_matrix(&dir.join(&mel_rel), &u.mel)?;
            let ssl_rel = match &u.ssl {
                Some(s) => {
                    let rel = format!("ssl/{}.sslf", u.id);
                    write_ssl_features(&dir.join(&rel), s)?;
                    Some(rel)
                }
                None => None,
            };
            records.push(UtteranceRecord {
                id: u.id.clone(),
                split: Some(*split),
                phonemes: Some(u.phonemes.clone()),
                durations: Some(u.durations.clone()),
                pitch: Some(u.pitch.clone()),
                energy: Some(u.energy.clone()),
                mel: Some(mel_rel),
                ssl: ssl_rel,
            });
        }
        let manifest = Manifest { header, records };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_jsonl()).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        Self::from_manifest(dir, &manifest)
    }

    pub fn from_manifest(dir: &Path, manifest: &Manifest) -> Result<Self> {
        let h = &manifest.header;
        let mut utterances = Vec::with_capacity(manifest.records.len());
        let mut splits = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let missing = |field: &str| Error::Data(format!("record {}: missing {field}", r.id));
            let mel_path = resolve(dir, r.mel.as_deref().ok_or_else(|| missing("mel"))?)?;
            let mel = load_matrix(&mel_path)?;
            if mel.cols() != h.n_mels {
                return Err(Error::Data(format!(
                    "{}: mel has {} bins, manifest declares {}",
                    mel_path.display(),
                    mel.cols(),
                    h.n_mels
                )));
            }
            let ssl = match &r.ssl {
                Some(rel) => {
                    let p = resolve(dir, rel)?;
                    let f = load_ssl_features(&p, Some(h.ssl_dim)).map_err(|e| match e {
                        Error::Format { offset, message } => Error::Format {
                            offset,
                            message: format!("{}: {message}", p.display()),
                        },
                        other => other,
                    })?;
                    Some(f)
                }
                None => None,
            };
            utterances.push(Utterance {
                id: r.id.clone(),
                phonemes: r.phonemes.clone().ok_or_else(|| missing("phonemes"))?,
                durations: r.durations.clone().ok_or_else(|| missing("durations"))?,
                pitch: r.pitch.clone().ok_or_else(|| missing("pitch"))?,
                energy: r.energy.clone().ok_or_else(|| missing("energy"))?,
                mel,
                ssl,
            });
            splits.push(r.split.unwrap_or(Split::Train));
        }
        let ssl_map = match &h.ssl_map {
            Some(rel) => Some(load_matrix(&resolve(dir, rel)?)?),
            None => None,
        };
        Ok(Self {
            header: h.clone(),
            utterances,
            splits,
            ssl_map,
        })
    }
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Data(format!("manifest path {rel:?} must be relative and inside the corpus")));
    }
    Ok(dir.join(p))
}

/// Deterministic corpus of `n_utts` utterances.
///
/// Mel frames are per-phoneme template rows plus noise. SSL features are a
/// seeded linear map of the mel resampled to the SSL frame rate; each of the
/// twelve synthetic layers adds independent noise and the configured layers
/// are averaged.
pub fn gen_synthetic_corpus(n_utts: usize, model: &ModelConfig, corpus: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if n_utts == 0 {
        return Err(Error::Argument("corpus needs at least one utterance".into()));
    }
    corpus.validate()?;
    let n_mels = model.n_mels;
    let noise = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::Config(format!("noise level: {e}")));
    let mel_noise = noise(corpus.mel_noise)?;
    let ssl_noise = noise(corpus.ssl_noise)?;

    let mut trng = site_rng(seed, "corpus.templates");
    let templates: Vec<Vec<f64>> = (0..model.vocab_size)
        .map(|_| (0..n_mels).map(|_| trng.random_range(-4.0..0.0)).collect())
        .collect();
    let mut mrng = site_rng(seed, "corpus.ssl_map");
    let map_scale = noise(1.0 / (n_mels as f64).sqrt())?;
    let ssl_map = Matrix::new(
        n_mels,
        model.ssl_dim,
        (0..n_mels * model.ssl_dim).map(|_| round_f32(map_scale.sample(&mut mrng))).collect(),
    )?;

    let n_eval = ((n_utts as f64) * corpus.eval_fraction).round() as usize;
    let n_eval = n_eval.min(n_utts - 1);
    let mut utterances = Vec::with_capacity(n_utts);
    let mut splits = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let id = format!("utt{u:04}");
        let mut rng = site_rng(seed, &format!("corpus.{id}"));
        let len = rng.random_range(corpus.min_phonemes..=corpus.max_phonemes);
        let phonemes: Vec<usize> = (0..len).map(|_| rng.random_range(1..model.vocab_size)).collect();
        let durations: Vec<usize> = (0..len)
            .map(|_| rng.random_range(corpus.min_duration..=corpus.max_duration))
            .collect();
        let t: usize = durations.iter().sum();
        let mut mel = Matrix::zeros(t, n_mels);
        let (mut pitch, mut energy) = (Vec::with_capacity(t), Vec::with_capacity(t));
        let mut frame = 0;
        for (&p, &d) in phonemes.iter().zip(&durations) {
            for k in 0..d {
                for (c, v) in mel.row_mut(frame).iter_mut().enumerate() {
                    *v = round_f32(templates[p][c] + mel_noise.sample(&mut rng));
                }
                pitch.push(synthetic_pitch(p, k));
                energy.push(synthetic_energy(p, k));
                frame += 1;
            }
        }

        let n_ssl = ssl_frames_for(t);
        let base = resample_nearest(&mel, n_ssl);
        let base = matmul(&base, &ssl_map);
        let stack: Vec<Matrix> = (0..SYNTHETIC_SSL_LAYERS)
            .map(|_| {
                let mut layer = base.clone();
                layer.data_mut().iter_mut().for_each(|v| *v += ssl_noise.sample(&mut rng));
                layer
            })
            .collect();
        let features = average_layers(&stack, &DEFAULT_SSL_LAYERS)?.map(round_f32);

        utterances.push(Utterance {
            id,
            phonemes,
            durations,
            pitch,
            energy,
            mel,
            ssl: Some(SslFeatures {
                features,
                frame_spec: FrameSpec::SSL,
            }),
        });
        splits.push(if u >= n_utts - n_eval { Split::Eval } else { Split::Train });
    }

    Ok(Corpus {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            n_mels,
            ssl_dim: model.ssl_dim,
            vocab_size: model.vocab_size,
            mel_frame_spec: FrameSpec::FS2,
            ssl_frame_spec: FrameSpec::SSL,
            seed,
            ssl_layers: DEFAULT_SSL_LAYERS.to_vec(),
            ssl_map: None,
        },
        utterances,
        splits,
        ssl_map: Some(ssl_map),
    })
}

/// Picks for each SSL frame the mel frame with the nearest centre.
fn resample_nearest(mel: &Matrix, n_ssl: usize) -> Matrix {
    let mut out = Matrix::zeros(n_ssl, mel.cols());
    for j in 0..n_ssl {
        let c = FrameSpec::SSL.center_ms(j);
        let i = ((c - FrameSpec::FS2.window_ms / 2.0) / FrameSpec::FS2.hop_ms).round();
        let i = (i.max(0.0) as usize).min(mel.rows().saturating_sub(1));
        out.row_mut(j).copy_from_slice(mel.row(i));
    }
    out
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        let dst = out.row_mut(r);
        for (k, &x) in row.iter().enumerate() {
            for (d, &w) in dst.iter_mut().zip(b.row(k)) {
                *d += x * w;
            }
        }
    }
    out
}

// ---- validation ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub utterances: usize,
    pub train: usize,
    pub eval: usize,
    pub frames: usize,
}

/// Loads every blob and checks dims against `cfg` and per-utterance
/// consistency, including that the SSL features align to the mel length.
pub fn validate_corpus(dir: &Path, cfg: &ModelConfig) -> Result<ValidationReport> {
    let corpus = Corpus::load(dir)?;
    let h = &corpus.header;
    if h.n_mels != cfg.n_mels || h.ssl_dim != cfg.ssl_dim {
        return Err(Error::Data(format!(
            "corpus dims n_mels={} ssl_dim={} do not match config n_mels={} ssl_dim={}",
            h.n_mels, h.ssl_dim, cfg.n_mels, cfg.ssl_dim
        )));
    }
    if h.vocab_size > cfg.vocab_size {
        return Err(Error::Data(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            h.vocab_size, cfg.vocab_size
        )));
    }
    let mut frames = 0;
    for u in &corpus.utterances {
        if let Some(&p) = u.phonemes.iter().find(|&&p| p == 0 || p >= cfg.vocab_size) {
            return Err(Error::Data(format!("{}: phoneme id {p} out of range", u.id)));
        }
        let mut item = u.to_batch_item(&cfg.clone().with_variant(Variant::Baseline))?;
        if u.ssl.is_some() {
            item.ssl = Some(prepare_ssl_target(u, cfg)?);
        }
        Batch::from_items(&[item])?;
        frames += u.frames();
    }
    Ok(ValidationReport {
        utterances: corpus.utterances.len(),
        train: corpus.split(Split::Train).len(),
        eval: corpus.split(Split::Eval).len(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::build_schedule;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f32_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0f32..2.0) as f64).collect()).unwrap()
    }

    fn tiny_corpus(n: usize, seed: u64) -> Corpus {
        gen_synthetic_corpus(n, &ModelConfig::tiny(), &CorpusConfig::default(), seed).unwrap()
    }

    #[test]
    fn sslf_layout_is_bit_exact() {
        let f = SslFeatures {
            features: Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.25, -1.0]).unwrap(),
            frame_spec: FrameSpec::SSL,
        };
        let bytes = encode_sslf(&f).unwrap();
        let mut expected = b"SSLF".to_vec();
        expected.extend_from_slice(&[1, 0, 3, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&16000u32.to_le_bytes());
        expected.extend_from_slice(&25.0f32.to_le_bytes());
        expected.extend_from_slice(&20.0f32.to_le_bytes());
        for v in [1.0f32, -2.0, 0.5, 0.0, 3.25, -1.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(decode_sslf(&bytes, Some(3)).unwrap(), f);
    }

    #[test]
    fn sslf_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = SslFeatures {
            features: f32_matrix(49, 768, 1),
            frame_spec: FrameSpec::SSL,
        };
        let path = dir.path().join("a.sslf");
        write_ssl_features(&path, &f).unwrap();
        assert_eq!(load_ssl_features(&path, Some(768)).unwrap(), f);
    }

    #[test]
    fn sslf_errors_carry_offsets() {
        let f = SslFeatures {
            features: f32_matrix(4, 8, 2),
            frame_spec: FrameSpec::SSL,
        };
        let bytes = encode_sslf(&f).unwrap();

        let err = decode_sslf(&bytes[..bytes.len() - 6], None).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, SSLF_HEADER_LEN);
                assert!(message.contains("missing 6"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let err = decode_sslf(&bytes[..10], None).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, ref message } if message.contains("missing 2")), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sslf(&bad, None), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_sslf(&bad, None), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_sslf(&bytes, Some(768)), Err(Error::Format { offset: 6, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_sslf(&long, None), Err(Error::Format { offset, .. }) if offset == bytes.len()));
    }

    #[test]
    fn matf_round_trip() {
        let m = f32_matrix(7, 5, 3);
        assert_eq!(decode_matf(&encode_matf(&m).unwrap()).unwrap(), m);
        assert_eq!(decode_matf(&encode_matf(&Matrix::zeros(0, 5)).unwrap()).unwrap().rows(), 0);
        assert!(matches!(decode_matf(b"MATF\x01\x00"), Err(Error::Format { offset: 6, .. })));
    }

    #[test]
    fn averaging_layers() {
        let a = f32_matrix(3, 4, 4);
        assert_eq!(average_layers(&[a.clone(), a.clone(), a.clone()], &[1, 2, 3]).unwrap(), a);
        let neg = a.map(|v| -v);
        assert!(average_layers(&[a.clone(), neg], &[1, 2]).unwrap().data().iter().all(|&v| v == 0.0));

        let stack: Vec<Matrix> = (0..12).map(|s| f32_matrix(5, 6, 10 + s)).collect();
        let avg = average_layers(&stack, &[9, 10, 11]).unwrap();
        for i in 0..30 {
            let oracle = (stack[8].data()[i] + stack[9].data()[i] + stack[10].data()[i]) / 3.0;
            assert!((avg.data()[i] - oracle).abs() < 1e-12);
        }
        assert!(matches!(average_layers(&stack, &[0]), Err(Error::Argument(_))));
        assert!(matches!(average_layers(&stack, &[13]), Err(Error::Argument(_))));
        assert!(matches!(average_layers(&stack, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn corpus_is_deterministic_and_consistent() {
        let a = tiny_corpus(6, 7);
        assert_eq!(a, tiny_corpus(6, 7));
        assert_ne!(a.utterances, tiny_corpus(6, 8).utterances);
        for u in &a.utterances {
            let t: usize = u.durations.iter().sum();
            assert_eq!(t, u.mel.rows());
            assert_eq!((u.pitch.len(), u.energy.len()), (t, t));
            assert!((4..=16).contains(&u.phonemes.len()));
            assert!(u.durations.iter().all(|d| (1..=6).contains(d)));
            assert!(u.phonemes.iter().all(|&p| p >= 1 && p < 12));
            let n = u.ssl.as_ref().unwrap().features.rows();
            let aligned = |n| target_frame_count(&FrameSpec::SSL, &FrameSpec::FS2, n);
            let best = (1..=t).map(|k| aligned(k).abs_diff(t)).min().unwrap();
            assert_eq!(aligned(n).abs_diff(t), best);
            assert!(best <= 1);
        }
        assert_eq!(a.split(Split::Eval).len(), 2);
    }

    #[test]
    fn written_corpora_are_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        tiny_corpus(3, 5).write(d1.path()).unwrap();
        tiny_corpus(3, 5).write(d2.path()).unwrap();
        for rel in ["manifest.jsonl", "ssl_map.matf", "mel/utt0001.matf", "ssl/utt0002.sslf"] {
            assert_eq!(fs::read(d1.path().join(rel)).unwrap(), fs::read(d2.path().join(rel)).unwrap(), "{rel}");
        }
        let loaded = Corpus::load(d1.path()).unwrap();
        let mut original = tiny_corpus(3, 5);
        original.header.ssl_map = Some("ssl_map.matf".into());
        assert_eq!(loaded, original);
        validate_corpus(d1.path(), &ModelConfig::tiny()).unwrap();
        let wide = ModelConfig {
            n_mels: 7,
            ..ModelConfig::tiny()
        };
        assert!(matches!(validate_corpus(d1.path(), &wide), Err(Error::Data(_))));
    }

    #[test]
    fn ssl_targets_match_mel_length() {
        let cfg = ModelConfig::tiny();
        for u in &tiny_corpus(8, 9).utterances {
            assert_eq!(prepare_ssl_target(u, &cfg).unwrap().rows(), u.frames());
        }
    }

    #[test]
    fn zero_sigma_target_is_pure_repetition() {
        let cfg = ModelConfig {
            noise_sigma: 0.0,
            ..ModelConfig::tiny()
        };
        let u = &tiny_corpus(1, 3).utterances[0];
        let src = &u.ssl.as_ref().unwrap().features;
        let sched = build_schedule(src.rows(), &FrameSpec::SSL, &FrameSpec::FS2);
        let target = prepare_ssl_target(u, &cfg).unwrap();
        for t in 0..target.rows() {
            let e = sched.entries()[t.min(sched.dst_len() - 1)];
            assert_eq!(target.row(t), src.row(e.src_index));
        }
    }

    fn utterance_with(frames: usize, ssl_frames: usize) -> Utterance {
        Utterance {
            id: "x".into(),
            phonemes: vec![1],
            durations: vec![frames],
            pitch: vec![0.0; frames],
            energy: vec![0.0; frames],
            mel: Matrix::zeros(frames, 6),
            ssl: Some(SslFeatures {
                features: f32_matrix(ssl_frames, 8, 1),
                frame_spec: FrameSpec::SSL,
            }),
        }
    }

    #[test]
    fn twenty_three_ssl_frames_use_their_schedule() {
        let cfg = ModelConfig::tiny();
        let u = utterance_with(38, 23);
        let sched = build_schedule(23, &FrameSpec::SSL, &FrameSpec::FS2);
        assert_eq!(sched.dst_len(), 38);
        let direct = apply_repeater(&u.ssl.as_ref().unwrap().features, &sched, cfg.noise_sigma, utterance_seed(cfg.seed, "x")).unwrap();
        assert_eq!(prepare_ssl_target(&u, &cfg).unwrap(), direct);
    }

    #[test]
    fn gross_mismatch_is_a_data_error() {
        let cfg = ModelConfig::tiny();
        assert!(matches!(prepare_ssl_target(&utterance_with(40, 10), &cfg), Err(Error::Data(_))));
        assert!(matches!(prepare_ssl_target(&utterance_with(38, 18), &cfg), Err(Error::Data(_))));
        // 38 mel frames allow a 3-frame miss; 21 SSL frames align to 35.
        assert_eq!(prepare_ssl_target(&utterance_with(38, 21), &cfg).unwrap().rows(), 38);
        let mut wrong_dim = utterance_with(38, 23);
        wrong_dim.ssl.as_mut().unwrap().features = Matrix::zeros(23, 5);
        assert!(matches!(prepare_ssl_target(&wrong_dim, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_round_trip_and_fragments() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(2, 1).write(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.starts_with("{\"kind\":\"header\""));
        assert_eq!(Manifest::parse(&text).unwrap(), manifest);
        assert!(matches!(Manifest::parse(text.lines().nth(1).unwrap()), Err(Error::Data(_))));

        let fragment = "{\"kind\":\"utterance\",\"id\":\"utt0001\",\"ssl\":\"ssl/new.sslf\"}\n";
        let records = parse_fragment(fragment).unwrap();
        assert_eq!(records[0].phonemes, None);
        let mut m = manifest.clone();
        assert_eq!(m.merge_fragment(&records).unwrap(), 1);
        assert_eq!(m.records[1].ssl.as_deref(), Some("ssl/new.sslf"));
        let unknown = parse_fragment("{\"kind\":\"utterance\",\"id\":\"nope\",\"ssl\":\"a\"}").unwrap();
        assert!(m.merge_fragment(&unknown).is_err());
    }

    #[test]
    fn manifest_paths_stay_inside_the_corpus() {
        assert!(resolve(Path::new("/c"), "../etc/passwd").is_err());
        assert!(resolve(Path::new("/c"), "/etc/passwd").is_err());
        assert_eq!(resolve(Path::new("/c"), "mel/a.matf").unwrap(), Path::new("/c/mel/a.matf"));
    }

    proptest! {
        #[test]
        fn target_length_always_equals_mel_length(t in 4usize..400, delta in -1i64..=1, seed in 0u64..50) {
            let n = (ssl_frames_for(t) as i64 + delta).max(1) as usize;
            let mut u = utterance_with(t, n);
            u.ssl.as_mut().unwrap().features = f32_matrix(n, 8, seed);
            let aligned = target_frame_count(&FrameSpec::SSL, &FrameSpec::FS2, n);
            match prepare_ssl_target(&u, &ModelConfig::tiny()) {
                Ok(m) => prop_assert_eq!(m.rows(), t),
                Err(Error::Data(_)) => prop_assert!(aligned.abs_diff(t) > frame_mismatch_allowed(t)),
                Err(e) => prop_assert!(false, "{}", e),
            }
        }
    }
}
