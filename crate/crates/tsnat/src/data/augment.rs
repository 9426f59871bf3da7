//! Time- and frequency-masking augmentation for training features.

use rand::Rng;

/// Spans to zero, drawn before application so tests can verify the exact
/// union of masked rows and channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// (start, width) over the time axis.
    pub time_spans: Vec<(usize, usize)>,
    /// (start, width) over the feature axis.
    pub freq_spans: Vec<(usize, usize)>,
}

impl MaskPlan {
    pub fn masked_rows(&self, n_frames: usize) -> Vec<bool> {
        let mut rows = vec![false; n_frames];
        for &(start, width) in &self.time_spans {
            for r in rows.iter_mut().skip(start).take(width) {
                *r = true;
            }
        }
        rows
    }

    pub fn masked_cols(&self, feature_dim: usize) -> Vec<bool> {
        let mut cols = vec![false; feature_dim];
        for &(start, width) in &self.freq_spans {
            for c in cols.iter_mut().skip(start).take(width) {
                *c = true;
            }
        }
        cols
    }
}

/// Draw mask spans: each width is uniform in [0, max_width], each start
/// uniform over the positions where the span fits.
pub fn draw_mask_plan(
    n_frames: usize,
    feature_dim: usize,
    n_time_masks: usize,
    max_time_width: usize,
    n_freq_masks: usize,
    max_freq_width: usize,
    rng: &mut impl Rng,
) -> MaskPlan {
    assert!(max_time_width <= n_frames, "time mask wider than the matrix");
    assert!(max_freq_width <= feature_dim, "freq mask wider than the matrix");
    let mut span = |n: usize, max_w: usize| -> (usize, usize) {
        let w = rng.gen_range(0..=max_w);
        let start = rng.gen_range(0..=n - w);
        (start, w)
    };
    MaskPlan {
        time_spans: (0..n_time_masks).map(|_| span(n_frames, max_time_width)).collect(),
        freq_spans: (0..n_freq_masks).map(|_| span(feature_dim, max_freq_width)).collect(),
    }
}

/// Zero the planned spans of a T×F matrix in place.
pub fn apply_mask_plan(frames: &mut [f32], n_frames: usize, feature_dim: usize, plan: &MaskPlan) {
    debug_assert_eq!(frames.len(), n_frames * feature_dim);
    for &(start, width) in &plan.time_spans {
        for t in start..(start + width).min(n_frames) {
            frames[t * feature_dim..(t + 1) * feature_dim].fill(0.0);
        }
    }
    for &(start, width) in &plan.freq_spans {
        for t in 0..n_frames {
            let row = &mut frames[t * feature_dim..(t + 1) * feature_dim];
            for v in row.iter_mut().skip(start).take(width) {
                *v = 0.0;
            }
        }
    }
}

/// Draw and apply masks to a copy of the frame matrix. Training-time only.
#[allow(clippy::too_many_arguments)]
pub fn spec_mask(
    frames: &[f32],
    n_frames: usize,
    feature_dim: usize,
    n_time_masks: usize,
    max_time_width: usize,
    n_freq_masks: usize,
    max_freq_width: usize,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let plan = draw_mask_plan(
        n_frames,
        feature_dim,
        n_time_masks,
        max_time_width,
        n_freq_masks,
        max_freq_width,
        rng,
    );
    let mut out = frames.to_vec();
    apply_mask_plan(&mut out, n_frames, feature_dim, &plan);
    out
}
