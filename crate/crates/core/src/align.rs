//! Repeater alignment between SSL-rate and acoustic-model-rate frame grids.
//!
//! SSL encoders emit one frame every 20 ms over a 25 ms window at 16 kHz,
//! while the acoustic model works at 22.05 kHz with a 45.6 ms window and an
//! 11.6 ms hop. The repeater maps each acoustic frame to one SSL frame with a
//! fixed pattern:
//!
//! * the first five SSL frames become seven acoustic frames, by repeating the
//!   second and the fourth frame;
//! * every following group of three SSL frames `[a, b, c]` becomes
//!   `[a, a, b, b~, c]`, where `b~` is a copy of `b` with Gaussian noise;
//! * the result is then cut from the end, or padded with copies of the final
//!   frame, until it matches the acoustic frame count.
//!
//! The acoustic frame count is given by [`target_frame_count`], which aligns
//! frame centres (`i * hop + window / 2`) of the two grids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Framing of one feature stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl FrameSpec {
    /// 16 kHz, 25 ms window, 20 ms hop.
    pub const SSL: FrameSpec = FrameSpec {
        sample_rate: 16_000,
        window_ms: 25.0,
        hop_ms: 20.0,
    };

    /// 22.05 kHz, 45.6 ms window, 11.6 ms hop.
    pub const FS2: FrameSpec = FrameSpec {
        sample_rate: 22_050,
        window_ms: 45.6,
        hop_ms: 11.6,
    };

    pub fn new(sample_rate: u32, window_ms: f64, hop_ms: f64) -> Result<Self> {
        let spec = FrameSpec {
            sample_rate,
            window_ms,
            hop_ms,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if !(self.hop_ms.is_finite() && self.hop_ms > 0.0) {
            return Err(Error::Argument(format!(
                "hop must be positive, got {} ms",
                self.hop_ms
            )));
        }
        if !(self.window_ms.is_finite() && self.window_ms >= self.hop_ms) {
            return Err(Error::Argument(format!(
                "window ({} ms) must be at least the hop ({} ms)",
                self.window_ms, self.hop_ms
            )));
        }
        Ok(())
    }

    /// Centre of frame `i` in milliseconds.
    pub fn center_ms(&self, i: usize) -> f64 {
        i as f64 * self.hop_ms + self.window_ms / 2.0
    }
}

/// Start and end time of frame `i`, in milliseconds.
pub fn frame_interval(spec: &FrameSpec, i: i64) -> Result<(f64, f64)> {
    if i < 0 {
        return Err(Error::Argument(format!("frame index must be >= 0, got {i}")));
    }
    let start = i as f64 * spec.hop_ms;
    Ok((start, start + spec.window_ms))
}

/// Number of `dst` frames covered by `n_src` frames of `src`.
///
/// The last source frame centre is mapped onto the nearest destination frame
/// centre; the count is that frame's index plus one, and never below one for
/// non-empty input.
pub fn target_frame_count(src: &FrameSpec, dst: &FrameSpec, n_src: usize) -> usize {
    if n_src == 0 {
        return 0;
    }
    let last_center = src.center_ms(n_src - 1);
    let offset = (last_center - dst.window_ms / 2.0) / dst.hop_ms;
    let idx = offset.round();
    if idx < 0.0 {
        1
    } else {
        1 + idx as usize
    }
}

/// Where noise is applied inside a `{2, 2, 1}` body group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// Only the repeat of the second frame is noisy.
    #[default]
    SecondRepeat,
    /// Both repeats of a group are noisy.
    BothRepeats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub src_index: usize,
    pub add_noise: bool,
}

/// Row mapping from source frames to destination frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSchedule {
    entries: Vec<ScheduleEntry>,
    src_len: usize,
}

impl AlignmentSchedule {
    /// Every source frame once, without noise.
    pub fn identity(n: usize) -> Self {
        Self {
            entries: (0..n)
                .map(|src_index| ScheduleEntry {
                    src_index,
                    add_noise: false,
                })
                .collect(),
            src_len: n,
        }
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn dst_len(&self) -> usize {
        self.entries.len()
    }

    pub fn src_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.src_index).collect()
    }

    /// CSV rows `dst_index,src_index,add_noise`, with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dst_index,src_index,add_noise\n");
        for (t, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{t},{},{}\n", e.src_index, e.add_noise));
        }
        out
    }
}

const HEAD_LEN: usize = 5;
const HEAD_PATTERN: [usize; 7] = [0, 1, 1, 2, 3, 3, 4];

pub fn build_schedule(n_src: usize, src: &FrameSpec, dst: &FrameSpec) -> AlignmentSchedule {
    build_schedule_with(n_src, src, dst, NoisePlacement::default())
}

pub fn build_schedule_with(
    n_src: usize,
    src: &FrameSpec,
    dst: &FrameSpec,
    placement: NoisePlacement,
) -> AlignmentSchedule {
    let plain = |src_index| ScheduleEntry {
        src_index,
        add_noise: false,
    };
    let mut entries: Vec<ScheduleEntry> = HEAD_PATTERN
        .iter()
        .copied()
        .filter(|&i| i < n_src)
        .map(plain)
        .collect();

    if n_src > HEAD_LEN {
        for group in (HEAD_LEN..n_src).collect::<Vec<_>>().chunks(3) {
            let a = group[0];
            entries.push(plain(a));
            entries.push(ScheduleEntry {
                src_index: a,
                add_noise: placement == NoisePlacement::BothRepeats,
            });
            if let Some(&b) = group.get(1) {
                entries.push(plain(b));
                entries.push(ScheduleEntry {
                    src_index: b,
                    add_noise: true,
                });
            }
            if let Some(&c) = group.get(2) {
                entries.push(plain(c));
            }
        }
    }

    let target = target_frame_count(src, dst, n_src);
    entries.truncate(target);
    while entries.len() < target {
        let last = entries.last().map_or(0, |e| e.src_index);
        entries.push(plain(last));
    }

    AlignmentSchedule {
        entries,
        src_len: n_src,
    }
}

/// Expands `features` (one row per source frame) along `schedule`.
///
/// Rows flagged for noise get an elementwise draw from `N(0, noise_sigma^2)`.
/// The noise stream is seeded from `rng_seed` alone, so equal seeds give
/// bit-identical output.
pub fn apply_repeater(
    features: &Matrix,
    schedule: &AlignmentSchedule,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<Matrix> {
    if features.rows() != schedule.src_len() {
        return Err(Error::Dimension(format!(
            "schedule expects {} source frames, features have {}",
            schedule.src_len(),
            features.rows()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Argument(format!(
            "noise sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }
    let cols = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut data = Vec::with_capacity(schedule.dst_len() * cols);
    for entry in schedule.entries() {
        let row = features.row(entry.src_index);
        if entry.add_noise && noise_sigma > 0.0 {
            data.extend(row.iter().map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + noise_sigma * z
            }));
        } else {
            data.extend_from_slice(row);
        }
    }
    Matrix::new(schedule.dst_len(), cols, data)
}
