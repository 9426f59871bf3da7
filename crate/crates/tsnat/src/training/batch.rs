//! Teacher-forcing pair construction and padded batch assembly.

use rand_chacha::ChaCha8Rng;

use crate::data::{apply_mask_plan, draw_mask_plan, Corpus, Vocab};

use super::TrainError;

fn check_targets(targets: &[u32]) -> Result<(), TrainError> {
    if targets.is_empty() {
        return Err(TrainError::EmptyTargets);
    }
    if let Some(&bad) = targets.iter().find(|&&t| Vocab::is_special(t)) {
        return Err(TrainError::SpecialInTargets(bad));
    }
    Ok(())
}

/// AR teacher forcing: input `[BOS, y_1..y_L]`, target `[y_1..y_L, EOS]`.
pub fn make_ar_pair(targets: &[u32]) -> Result<(Vec<u32>, Vec<u32>), TrainError> {
    check_targets(targets)?;
    let mut input = Vec::with_capacity(targets.len() + 1);
    input.push(Vocab::BOS);
    input.extend_from_slice(targets);
    let mut target = targets.to_vec();
    target.push(Vocab::EOS);
    Ok((input, target))
}

/// NAR input: `[MASK] × (L+1)` against the same `[y_1..y_L, EOS]` target.
pub fn make_nar_pair(targets: &[u32]) -> Result<(Vec<u32>, Vec<u32>), TrainError> {
    check_targets(targets)?;
    let input = vec![Vocab::MASK; targets.len() + 1];
    let mut target = targets.to_vec();
    target.push(Vocab::EOS);
    Ok((input, target))
}

/// One padded training batch.
///
/// AR rows pad to the batch's longest target (causal masking makes AR
/// length-robust); NAR rows pad all the way to L_max so the NAR decoder is
/// conditioned at exactly the fixed length inference uses. Padding is `<PAD>`
/// and contributes nothing to either loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub utt_indices: Vec<usize>,
    /// [B, t_max, F] zero-padded features.
    pub feats: Vec<f64>,
    pub t_max: usize,
    pub frame_lens: Vec<usize>,
    /// [B, l_ar]: `[BOS, y.., PAD..]`
    pub ar_inputs: Vec<u32>,
    /// [B, l_ar]: `[y.., EOS, PAD..]`
    pub ar_targets: Vec<u32>,
    pub l_ar: usize,
    /// [B, l_nar]: `[MASK × (L+1), PAD..]`, l_nar = L_max
    pub nar_inputs: Vec<u32>,
    /// [B, l_nar]: `[y.., EOS, PAD..]`
    pub nar_targets: Vec<u32>,
    pub l_nar: usize,
    /// Live target length per row (transcript + EOS).
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.utt_indices.len()
    }
}

/// Masking amounts for training-time feature augmentation. Widths derive
/// from each utterance's own dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_time_masks: 2,
            n_freq_masks: 1,
        }
    }
}

/// Group utterance indices into batches: sort by frame count, then cut into
/// consecutive buckets so padding waste stays small.
pub fn build_batches(corpus: &Corpus, batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..corpus.utterances.len()).collect();
    order.sort_by_key(|&i| (corpus.utterances[i].n_frames, i));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Assemble a padded batch. `l_max` is the model's fixed NAR decode length;
/// every transcript plus EOS must fit in it. When `augment` is given, each
/// utterance's frames pass through time/frequency masking first.
pub fn assemble_batch(
    corpus: &Corpus,
    indices: &[usize],
    l_max: usize,
    augment: Option<(AugmentConfig, &mut ChaCha8Rng)>,
) -> Result<Batch, TrainError> {
    let f = corpus.feature_dim;
    let b = indices.len();
    let t_max = indices
        .iter()
        .map(|&i| corpus.utterances[i].n_frames)
        .max()
        .unwrap_or(0);
    let l_ar = indices
        .iter()
        .map(|&i| corpus.utterances[i].transcript.len() + 1)
        .max()
        .unwrap_or(0);
    if l_ar > l_max {
        return Err(TrainError::InvalidConfig(format!(
            "transcript plus <EOS> needs {l_ar} positions but max_decode_len is {l_max}"
        )));
    }
    let l_nar = l_max;

    let mut feats = vec![0.0f64; b * t_max * f];
    let mut frame_lens = Vec::with_capacity(b);
    let mut ar_inputs = vec![Vocab::PAD; b * l_ar];
    let mut ar_targets = vec![Vocab::PAD; b * l_ar];
    let mut nar_inputs = vec![Vocab::PAD; b * l_nar];
    let mut nar_targets = vec![Vocab::PAD; b * l_nar];
    let mut target_lens = Vec::with_capacity(b);

    let mut aug = augment;
    for (row, &ui) in indices.iter().enumerate() {
        let u = &corpus.utterances[ui];
        let mut frames = u.frames.clone();
        if let Some((cfg, rng)) = aug.as_mut() {
            let max_t = (u.n_frames / 10).max(1);
            let max_f = (f / 8).max(1);
            let plan = draw_mask_plan(
                u.n_frames,
                f,
                cfg.n_time_masks,
                max_t,
                cfg.n_freq_masks,
                max_f,
                rng,
            );
            apply_mask_plan(&mut frames, u.n_frames, f, &plan);
        }
        for (dst, src) in feats[row * t_max * f..]
            .iter_mut()
            .zip(frames.iter().map(|&v| v as f64))
        {
            *dst = src;
        }
        frame_lens.push(u.n_frames);

        let (ar_in, target) = make_ar_pair(&u.transcript)?;
        let (nar_in, _) = make_nar_pair(&u.transcript)?;
        let live = target.len();
        ar_inputs[row * l_ar..row * l_ar + live].copy_from_slice(&ar_in);
        ar_targets[row * l_ar..row * l_ar + live].copy_from_slice(&target);
        nar_inputs[row * l_nar..row * l_nar + live].copy_from_slice(&nar_in);
        nar_targets[row * l_nar..row * l_nar + live].copy_from_slice(&target);
        target_lens.push(live);
    }

    Ok(Batch {
        utt_indices: indices.to_vec(),
        feats,
        t_max,
        frame_lens,
        ar_inputs,
        ar_targets,
        l_ar,
        nar_inputs,
        nar_targets,
        l_nar,
        target_lens,
    })
}
