//! Padded mini-batches.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Tensor;

/// One utterance's training targets, already on the acoustic frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel: Matrix,
    /// SSL target after the repeater, one row per mel frame.
    pub ssl: Option<Matrix>,
}

/// Items padded to the batch maxima, with row masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub size: usize,
    pub max_phonemes: usize,
    pub max_frames: usize,
    /// `[size * max_phonemes]`, zero at padding.
    pub phonemes: Vec<usize>,
    pub phoneme_mask: Vec<bool>,
    pub durations: Vec<Vec<usize>>,
    pub pitch: Vec<Vec<f64>>,
    pub energy: Vec<Vec<f64>>,
    /// `[size, max_frames, n_mels]`.
    pub mel: Option<Tensor>,
    pub frame_mask: Vec<bool>,
    /// `[size, max_frames, ssl_dim]`.
    pub ssl: Option<Tensor>,
}

fn pad_phonemes(lists: &[Vec<usize>]) -> (usize, Vec<usize>, Vec<bool>) {
    let l = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = vec![0; lists.len() * l];
    let mut mask = vec![false; lists.len() * l];
    for (b, p) in lists.iter().enumerate() {
        for (i, &id) in p.iter().enumerate() {
            ids[b * l + i] = id;
            mask[b * l + i] = true;
        }
    }
    (l, ids, mask)
}

fn pad_matrices(items: &[&Matrix], frames: usize) -> Tensor {
    let cols = items.first().map_or(0, |m| m.cols());
    let mut data = vec![0.0; items.len() * frames * cols];
    for (b, m) in items.iter().enumerate() {
        let n = m.rows() * cols;
        data[b * frames * cols..b * frames * cols + n].copy_from_slice(m.data());
    }
    Tensor::new(vec![items.len(), frames, cols], data).expect("padded shape")
}

/// Expands per-row lengths into a flat `[rows * max]` mask.
pub fn lengths_mask(lengths: &[usize], max: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&n| (0..max).map(move |t| t < n))
        .collect()
}

impl Batch {
    pub fn from_items(items: &[BatchItem]) -> Result<Self> {
        for it in items {
            let frames: usize = it.durations.iter().sum();
            if it.durations.len() != it.phonemes.len() {
                return Err(Error::Data(format!(
                    "{}: {} durations for {} phonemes",
                    it.id,
                    it.durations.len(),
                    it.phonemes.len()
                )));
            }
            if frames != it.mel.rows() || it.pitch.len() != frames || it.energy.len() != frames {
                return Err(Error::Data(format!(
                    "{}: durations sum to {frames} but mel/pitch/energy have {}/{}/{} frames",
                    it.id,
                    it.mel.rows(),
                    it.pitch.len(),
                    it.energy.len()
                )));
            }
            if let Some(s) = &it.ssl {
                if s.rows() != frames {
                    return Err(Error::Alignment(format!(
                        "{}: SSL target has {} frames, mel has {frames}",
                        it.id,
                        s.rows()
                    )));
                }
            }
        }
        if items.iter().any(|it| it.ssl.is_some()) && items.iter().any(|it| it.ssl.is_none()) {
            return Err(Error::Data("batch mixes items with and without SSL targets".into()));
        }
        let lists: Vec<Vec<usize>> = items.iter().map(|it| it.phonemes.clone()).collect();
        let (max_phonemes, phonemes, phoneme_mask) = pad_phonemes(&lists);
        let lengths: Vec<usize> = items.iter().map(|it| it.mel.rows()).collect();
        let max_frames = lengths.iter().copied().max().unwrap_or(0);
        let mels: Vec<&Matrix> = items.iter().map(|it| &it.mel).collect();
        let ssl = if items.first().is_some_and(|it| it.ssl.is_some()) {
            let s: Vec<&Matrix> = items.iter().map(|it| it.ssl.as_ref().unwrap()).collect();
            Some(pad_matrices(&s, max_frames))
        } else {
            None
        };
        Ok(Self {
            ids: items.iter().map(|it| it.id.clone()).collect(),
            size: items.len(),
            max_phonemes,
            max_frames,
            phonemes,
            phoneme_mask,
            durations: items.iter().map(|it| it.durations.clone()).collect(),
            pitch: items.iter().map(|it| it.pitch.clone()).collect(),
            energy: items.iter().map(|it| it.energy.clone()).collect(),
            mel: Some(pad_matrices(&mels, max_frames)),
            frame_mask: lengths_mask(&lengths, max_frames),
            ssl,
        })
    }

    /// Phoneme-only batch for synthesis.
    pub fn phonemes_only(lists: &[Vec<usize>]) -> Self {
        let (max_phonemes, phonemes, phoneme_mask) = pad_phonemes(lists);
        Self {
            ids: (0..lists.len()).map(|i| format!("input{i}")).collect(),
            size: lists.len(),
            max_phonemes,
            max_frames: 0,
            phonemes,
            phoneme_mask,
            durations: Vec::new(),
            pitch: Vec::new(),
            energy: Vec::new(),
            mel: None,
            frame_mask: Vec::new(),
            ssl: None,
        }
    }

    pub fn has_targets(&self) -> bool {
        self.mel.is_some() && self.durations.len() == self.size
    }

    /// Per-frame scalar targets as `[size, max_frames, 1]`.
    pub fn frame_values(&self, values: &[Vec<f64>]) -> Tensor {
        let t = self.max_frames;
        let mut data = vec![0.0; self.size * t];
        for (b, v) in values.iter().enumerate() {
            data[b * t..b * t + v.len()].copy_from_slice(v);
        }
        Tensor::new(vec![self.size, t, 1], data).expect("frame values shape")
    }

    /// Log-duration targets `[size, max_phonemes, 1]`; zero durations map
    /// to `ln 1`.
    pub fn log_durations(&self) -> Tensor {
        let l = self.max_phonemes;
        let mut data = vec![0.0; self.size * l];
        for (b, d) in self.durations.iter().enumerate() {
            for (i, &n) in d.iter().enumerate() {
                data[b * l + i] = (n.max(1) as f64).ln();
            }
        }
        Tensor::new(vec![self.size, l, 1], data).expect("duration shape")
    }
}
