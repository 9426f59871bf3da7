//! Decoding: one-step NAR greedy search, exact N-best pre-selection from the
//! probability graph, batched AR rescoring, two-step decoding, the AR beam
//! baseline, and real-time-factor accounting.

mod beam;
mod graph;
mod nbest;
mod rescore;

pub use beam::ar_beam_search;
pub use graph::{greedy_decode, ProbGraph};
pub use nbest::{nbest_from_graph, Hypothesis};
pub use rescore::ar_rescore;

use std::time::Instant;

use thiserror::Error;

use crate::data::{Utterance, Vocab};
use crate::model::{DecodeMode, FwdCtx, Model, ModelError};
use crate::tensor::{log_softmax, TensorError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid probability graph: {0}")]
    InvalidGraph(String),
    #[error("no hypotheses to rescore")]
    NoHypotheses,
    #[error("hypothesis of {len} tokens exceeds the decodable maximum {max}")]
    HypothesisTooLong { len: usize, max: usize },
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Candidates extracted from the graph; N = 1 falls back to greedy search.
    pub n_best: usize,
    /// Width of the AR beam-search baseline.
    pub beam_width: usize,
    /// Weight of the AR score in final selection; 1.0 ranks by AR alone.
    pub rescore_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            n_best: 10,
            beam_width: 10,
            rescore_weight: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.n_best == 0 {
            return Err(DecodeError::InvalidConfig("decode.n_best must be >= 1".into()));
        }
        if self.beam_width == 0 {
            return Err(DecodeError::InvalidConfig("decode.beam_width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rescore_weight) {
            return Err(DecodeError::InvalidConfig(
                "decode.rescore_weight must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder output for one utterance, detached from any tape so the decoder
/// can run against it any number of times.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub data: Vec<f64>,
    pub t: usize,
    pub d: usize,
}

/// Run the frozen encoder over one utterance's frames.
pub fn encode_frames(model: &Model, frames: &[f64], n_frames: usize) -> Result<Encoded, DecodeError> {
    let mut ctx = FwdCtx::eval(&model.params);
    let (node, t) = model.encode_utterance(&mut ctx, frames, n_frames)?;
    Ok(Encoded {
        data: ctx.tape.value(node).to_vec(),
        t,
        d: model.cfg.d_model,
    })
}

pub fn encode_utterance(model: &Model, utt: &Utterance) -> Result<Encoded, DecodeError> {
    encode_frames(model, &utt.frames_f64(), utt.n_frames)
}

/// One NAR pass over `[MASK] × L_max`, log-softmaxed into the graph.
pub fn nar_graph(model: &Model, enc: &Encoded) -> Result<ProbGraph, DecodeError> {
    let mut ctx = FwdCtx::eval(&model.params);
    let enc_node = ctx.tape.leaf(&[1, enc.t, enc.d], &enc.data, false);
    let l_max = model.cfg.max_decode_len;
    let masks = vec![Vocab::MASK; l_max];
    let (logits, _) = model.decoder_forward(&mut ctx, &masks, enc_node, DecodeMode::Nar)?;
    let v = model.cfg.vocab_size;
    let lp = log_softmax(ctx.tape.value(logits), l_max, v);
    ProbGraph::new(l_max, v, lp)
}

/// A decoded utterance with whichever scores its strategy produces.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub nar_score: Option<f64>,
    pub ar_score: Option<f64>,
}

/// Greedy path plus its length-normalized graph score. A path that never
/// emits `<EOS>` keeps all L_max tokens and is scored over L_max without an
/// EOS term.
pub fn greedy_result(graph: &ProbGraph) -> DecodeResult {
    let tokens = greedy_decode(graph);
    let sum: f64 = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| graph.lp(i, t))
        .sum();
    let nar_score = if tokens.len() < graph.l_max() {
        (sum + graph.lp(tokens.len(), Vocab::EOS)) / (tokens.len() as f64 + 1.0)
    } else {
        sum / graph.l_max() as f64
    };
    DecodeResult {
        tokens,
        nar_score: Some(nar_score),
        ar_score: None,
    }
}

/// Two-step decoding: NAR pre-selection of the N best graph paths, then one
/// batched AR rescoring pass. With N = 1 the result is exactly the greedy
/// search. Final selection ranks by rescore_weight·AR + (1−w)·NAR, breaking
/// ties by higher NAR score, then shorter, then lexicographic tokens.
pub fn two_step_decode(
    model: &Model,
    enc: &Encoded,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    cfg.validate()?;
    let graph = nar_graph(model, enc)?;
    if cfg.n_best == 1 {
        return Ok(greedy_result(&graph));
    }
    let mut hyps = nbest_from_graph(&graph, cfg.n_best);
    ar_rescore(model, enc, &mut hyps)?;
    let w = cfg.rescore_weight;
    let combined = |h: &Hypothesis| w * h.ar_score.expect("rescored") + (1.0 - w) * h.nar_score;
    let best = hyps
        .iter()
        .min_by(|a, b| {
            combined(b)
                .total_cmp(&combined(a))
                .then_with(|| b.nar_score.total_cmp(&a.nar_score))
                .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .expect("nbest_from_graph returns at least one path");
    Ok(DecodeResult {
        tokens: best.tokens.clone(),
        nar_score: Some(best.nar_score),
        ar_score: best.ar_score,
    })
}

/// AR beam-search decode of one utterance (the α = 1.0 baseline).
pub fn beam_decode(model: &Model, enc: &Encoded, cfg: &DecodeConfig) -> Result<DecodeResult, DecodeError> {
    cfg.validate()?;
    let (tokens, score) = ar_beam_search(model, enc, cfg.beam_width, model.cfg.max_decode_len - 1)?;
    Ok(DecodeResult {
        tokens,
        nar_score: None,
        ar_score: Some(score),
    })
}

/// Real-time factor: wall-clock seconds spent decoding divided by speech
/// seconds processed (frames at the nominal 10 ms shift). Utterances decode
/// strictly one by one.
pub fn measure_rtf<F: FnMut(&Utterance)>(utterances: &[Utterance], mut decode_fn: F) -> f64 {
    assert!(!utterances.is_empty(), "measure_rtf needs a non-empty corpus");
    let speech_seconds: f64 = utterances.iter().map(|u| u.speech_seconds()).sum();
    let start = Instant::now();
    for u in utterances {
        decode_fn(u);
    }
    start.elapsed().as_secs_f64() / speech_seconds
}
