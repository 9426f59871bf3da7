//! Second-step rescoring: all candidates run through the decoder in one
//! padded AR batch, scored by length-normalized teacher-forced likelihood.

use crate::data::Vocab;
use crate::model::{DecodeMode, FwdCtx, Model};
use crate::tensor::log_softmax;

use super::nbest::Hypothesis;
use super::{DecodeError, Encoded};

/// Teacher-forced AR log-softmax rows for a padded batch of inputs against
/// one encoded utterance (replicated across the batch). Returns [b, l, v].
pub(crate) fn ar_logprob_rows(
    model: &Model,
    enc: &Encoded,
    inputs: &[u32],
    b: usize,
    l: usize,
) -> Result<Vec<f64>, DecodeError> {
    let mut ctx = FwdCtx::eval(&model.params);
    let mut enc_data = Vec::with_capacity(b * enc.data.len());
    for _ in 0..b {
        enc_data.extend_from_slice(&enc.data);
    }
    let enc_node = ctx.tape.leaf(&[b, enc.t, enc.d], &enc_data, false);
    let (logits, _) =
        model.decoder_forward_batch(&mut ctx, inputs, b, l, None, enc_node, None, DecodeMode::Ar)?;
    let v = model.cfg.vocab_size;
    Ok(log_softmax(ctx.tape.value(logits), b * l, v))
}

/// Score of one row: Σ log P(y_i | y_<i, X) + log P(EOS | y, X), over ℓ+1.
fn row_score(rows: &[f64], l: usize, v: usize, row: usize, tokens: &[u32]) -> f64 {
    let base = row * l * v;
    let mut sum = 0.0;
    for (i, &t) in tokens.iter().enumerate() {
        sum += rows[base + i * v + t as usize];
    }
    sum += rows[base + tokens.len() * v + Vocab::EOS as usize];
    sum / (tokens.len() as f64 + 1.0)
}

/// Fill `ar_score` for every hypothesis with one batched AR pass. Batching
/// never changes a score relative to scoring the hypothesis alone.
pub fn ar_rescore(
    model: &Model,
    enc: &Encoded,
    hyps: &mut [Hypothesis],
) -> Result<(), DecodeError> {
    if hyps.is_empty() {
        return Err(DecodeError::NoHypotheses);
    }
    let max_tokens = model.cfg.max_decode_len - 1;
    if let Some(h) = hyps.iter().find(|h| h.tokens.len() > max_tokens) {
        return Err(DecodeError::HypothesisTooLong {
            len: h.tokens.len(),
            max: max_tokens,
        });
    }
    let b = hyps.len();
    let l = hyps.iter().map(|h| h.tokens.len() + 1).max().unwrap();
    let mut inputs = vec![Vocab::PAD; b * l];
    for (row, h) in hyps.iter().enumerate() {
        inputs[row * l] = Vocab::BOS;
        inputs[row * l + 1..row * l + 1 + h.tokens.len()].copy_from_slice(&h.tokens);
    }
    let rows = ar_logprob_rows(model, enc, &inputs, b, l)?;
    let v = model.cfg.vocab_size;
    for (row, h) in hyps.iter_mut().enumerate() {
        h.ar_score = Some(row_score(&rows, l, v, row, &h.tokens));
    }
    Ok(())
}
