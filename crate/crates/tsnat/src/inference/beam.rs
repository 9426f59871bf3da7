//! Length-normalized AR beam search, the α = 1.0 decoding baseline.

use crate::data::Vocab;
use crate::model::Model;

use super::nbest::rank_order;
use super::rescore::ar_logprob_rows;
use super::{DecodeError, Encoded};

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<u32>,
    sum: f64,
}

#[derive(Debug, Clone)]
struct Finished {
    tokens: Vec<u32>,
    score: f64,
}

/// Standard beam search in AR mode. All beams advance in lockstep through
/// batched decoder passes; expansions rank by summed log-probability with
/// ties toward lexicographically smaller token sequences; choosing `<EOS>`
/// retires a beam into the finished pool at score sum/(ℓ+1). Once a beam
/// holds `max_len` tokens only `<EOS>` remains, so the search always
/// terminates. The best finished hypothesis wins by normalized score (ties:
/// shorter, then lexicographic).
pub fn ar_beam_search(
    model: &Model,
    enc: &Encoded,
    beam_width: usize,
    max_len: usize,
) -> Result<(Vec<u32>, f64), DecodeError> {
    assert!(beam_width >= 1, "beam width must be >= 1");
    assert!(max_len >= 1 && max_len < model.cfg.max_decode_len);
    let v = model.cfg.vocab_size;
    let task_ids: Vec<u32> = (Vocab::N_SPECIALS..v as u32).collect();

    let mut active = vec![Beam {
        tokens: Vec::new(),
        sum: 0.0,
    }];
    let mut finished: Vec<Finished> = Vec::new();

    while !active.is_empty() {
        let cur_len = active[0].tokens.len();
        let l = cur_len + 1;
        let b = active.len();
        let mut inputs = vec![Vocab::PAD; b * l];
        for (row, beam) in active.iter().enumerate() {
            inputs[row * l] = Vocab::BOS;
            inputs[row * l + 1..row * l + 1 + cur_len].copy_from_slice(&beam.tokens);
        }
        let rows = ar_logprob_rows(model, enc, &inputs, b, l)?;

        // expand every beam over EOS plus (length permitting) the task tokens
        let mut candidates: Vec<(Vec<u32>, f64, bool)> = Vec::new();
        for (row, beam) in active.iter().enumerate() {
            let last = &rows[(row * l + cur_len) * v..(row * l + cur_len + 1) * v];
            candidates.push((
                beam.tokens.clone(),
                beam.sum + last[Vocab::EOS as usize],
                true,
            ));
            if cur_len < max_len {
                for &t in &task_ids {
                    let mut toks = beam.tokens.clone();
                    toks.push(t);
                    candidates.push((toks, beam.sum + last[t as usize], false));
                }
            }
        }
        candidates.sort_by(|a, b| a.1.total_cmp(&b.1).reverse().then_with(|| a.0.cmp(&b.0)));
        candidates.truncate(beam_width);

        active = Vec::new();
        for (tokens, sum, is_eos) in candidates {
            if is_eos {
                let score = sum / (tokens.len() as f64 + 1.0);
                finished.push(Finished { tokens, score });
            } else {
                active.push(Beam { tokens, sum });
            }
        }
    }

    let best = finished
        .into_iter()
        .min_by(|a, b| rank_order((a.score, &a.tokens), (b.score, &b.tokens)))
        .expect("search always finishes at least one hypothesis");
    Ok((best.tokens, best.score))
}
