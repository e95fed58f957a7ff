//! Segment-based frame sampling and dense temporal windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// One uniformly random frame per segment.
    TrainRandom,
    /// The middle frame of each segment.
    EvalCenter,
}

/// Picks `k` frame indices from a video of `n_frames`, one per segment
/// `[⌊i·n/k⌋, ⌊(i+1)·n/k⌋)`.
///
/// When `n_frames < k` some segments are empty; such a segment takes the last
/// frame at or before its start, so the output keeps `k` entries and stays
/// non-decreasing.
pub fn segment_sample<R: Rng + ?Sized>(
    n_frames: usize,
    k: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Vec<usize> {
    assert!(n_frames >= 1 && k >= 1, "segment_sample needs n_frames >= 1 and k >= 1");
    (0..k)
        .map(|i| {
            let lo = i * n_frames / k;
            let hi = (i + 1) * n_frames / k;
            if hi <= lo {
                lo.min(n_frames - 1)
            } else {
                match mode {
                    SampleMode::EvalCenter => (lo + hi - 1) / 2,
                    SampleMode::TrainRandom => rng.random_range(lo..hi),
                }
            }
        })
        .collect()
}

/// Frame slots of one dense window; `None` marks zero padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    /// First position covered (may be negative).
    pub start: isize,
    /// Last position covered, inclusive.
    pub end: isize,
    pub slots: Vec<Option<usize>>,
}

impl Window {
    pub fn left_pad(&self) -> usize {
        self.slots.iter().take_while(|s| s.is_none()).count()
    }

    pub fn right_pad(&self) -> usize {
        self.slots.iter().rev().take_while(|s| s.is_none()).count()
    }

    pub fn padded_positions(&self) -> Vec<isize> {
        (self.start..=self.end)
            .zip(&self.slots)
            .filter(|(_, s)| s.is_none())
            .map(|(p, _)| p)
            .collect()
    }
}

/// For every frame `p`, the window `[p - (w/2 - 1), p + w/2]` (for `w = 16`:
/// `[p-7, p+8]`), zero-padded past either end of the video.
pub fn sliding_window_expand(n_frames: usize, window: usize) -> Vec<Window> {
    assert!(window >= 2, "window must cover at least two frames");
    let left = (window / 2 - 1) as isize;
    let right = (window / 2) as isize;
    (0..n_frames as isize)
        .map(|p| {
            let (start, end) = (p - left, p + right);
            let slots = (start..=end)
                .map(|q| (q >= 0 && q < n_frames as isize).then_some(q as usize))
                .collect();
            Window { start, end, slots }
        })
        .collect()
}

/// Applies a clip-level feature function to every dense window of `raw`.
/// The function sees a `[window × d_raw]` matrix with zero rows for padding.
pub fn clip_features(raw: &Matrix, window: usize, f: impl Fn(&Matrix) -> Vec<f64>) -> Matrix {
    let d = raw.cols;
    let mut out = Vec::new();
    let mut cols = 0;
    for w in sliding_window_expand(raw.rows, window) {
        let mut data = vec![0.0; window * d];
        for (slot, frame) in w.slots.iter().enumerate() {
            if let Some(i) = frame {
                data[slot * d..(slot + 1) * d].copy_from_slice(&raw.data[i * d..(i + 1) * d]);
            }
        }
        let v = f(&Matrix {
            rows: window,
            cols: d,
            data,
        });
        cols = v.len();
        out.extend(v);
    }
    Matrix {
        rows: raw.rows,
        cols,
        data: out,
    }
}
