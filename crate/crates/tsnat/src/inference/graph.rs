//! The probability graph: per-position log-distributions from one NAR pass,
//! and greedy decoding over it.

use crate::data::Vocab;
use crate::tensor::{log_softmax, log_sum_exp};

use super::DecodeError;

/// L_max × vocab matrix of log-probabilities; every row normalizes to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGraph {
    logprobs: Vec<f64>,
    l_max: usize,
    vocab_size: usize,
}

impl ProbGraph {
    pub fn new(l_max: usize, vocab_size: usize, logprobs: Vec<f64>) -> Result<Self, DecodeError> {
        if logprobs.len() != l_max * vocab_size || l_max == 0 {
            return Err(DecodeError::InvalidGraph(format!(
                "expected {l_max}×{vocab_size} entries, got {}",
                logprobs.len()
            )));
        }
        for (i, row) in logprobs.chunks(vocab_size).enumerate() {
            let lse = log_sum_exp(row);
            if lse.abs() > 1e-9 {
                return Err(DecodeError::InvalidGraph(format!(
                    "row {i} logsumexp is {lse:e}, not 0"
                )));
            }
        }
        Ok(ProbGraph {
            logprobs,
            l_max,
            vocab_size,
        })
    }

    /// Build a valid graph from arbitrary scores by row-wise log-softmax.
    pub fn from_scores(l_max: usize, vocab_size: usize, scores: &[f64]) -> Result<Self, DecodeError> {
        ProbGraph::new(l_max, vocab_size, log_softmax(scores, l_max, vocab_size))
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logprobs[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn lp(&self, row: usize, token: u32) -> f64 {
        self.row(row)[token as usize]
    }

    pub fn data(&self) -> &[f64] {
        &self.logprobs
    }
}

/// Per-row argmax restricted to task tokens plus `<EOS>`, truncated just
/// before the first `<EOS>`. Ties break toward the smaller token id. When no
/// row picks `<EOS>`, all L_max argmax tokens are returned.
pub fn greedy_decode(graph: &ProbGraph) -> Vec<u32> {
    let mut out = Vec::new();
    for i in 0..graph.l_max() {
        let row = graph.row(i);
        let mut best = Vocab::EOS;
        let mut best_lp = row[Vocab::EOS as usize];
        for t in Vocab::N_SPECIALS..graph.vocab_size() as u32 {
            if row[t as usize] > best_lp {
                best = t;
                best_lp = row[t as usize];
            }
        }
        if best == Vocab::EOS {
            return out;
        }
        out.push(best);
    }
    out
}
