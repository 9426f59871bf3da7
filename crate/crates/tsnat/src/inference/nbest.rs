//! Exact N-best extraction from the probability graph.
//!
//! A hypothesis of length ℓ takes one non-special token from each of rows
//! 0..ℓ−1 and `<EOS>` at row ℓ; its score is the path's log-probability sum
//! divided by ℓ+1. Because rows are independent, the top N for a fixed end
//! row comes from best-first enumeration over per-row sorted candidates; the
//! per-length lists then merge across end rows.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use crate::data::Vocab;

use super::graph::ProbGraph;

/// A candidate token sequence with its length-normalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Task tokens only, never specials.
    pub tokens: Vec<u32>,
    /// Length-normalized NAR path score.
    pub nar_score: f64,
    /// Length-normalized AR score, filled by rescoring.
    pub ar_score: Option<f64>,
}

/// Final ordering: score desc, then shorter first, then lexicographic tokens.
pub(crate) fn rank_order(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

struct HeapState {
    sum: f64,
    /// index into each row's sorted candidate list
    picks: Vec<u32>,
    tokens: Vec<u32>,
}

impl PartialEq for HeapState {
    fn eq(&self, other: &Self) -> bool {
        self.sum == other.sum && self.tokens == other.tokens
    }
}
impl Eq for HeapState {}
impl PartialOrd for HeapState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapState {
    // max-heap: larger sum first, ties toward lexicographically smaller tokens
    fn cmp(&self, other: &Self) -> Ordering {
        self.sum
            .total_cmp(&other.sum)
            .then_with(|| other.tokens.cmp(&self.tokens))
    }
}

/// Exact top-N over all `<EOS>`-terminated paths, sorted by normalized score
/// (ties: shorter first, then lexicographic). Returns every path when fewer
/// than N exist.
pub fn nbest_from_graph(graph: &ProbGraph, n: usize) -> Vec<Hypothesis> {
    assert!(n >= 1, "nbest_from_graph requires N >= 1");
    // per-row candidates: non-special tokens sorted by logprob desc, id asc
    let task_ids: Vec<u32> = (Vocab::N_SPECIALS..graph.vocab_size() as u32).collect();
    let sorted_rows: Vec<Vec<u32>> = (0..graph.l_max())
        .map(|r| {
            let mut ids = task_ids.clone();
            ids.sort_by(|&a, &b| graph.lp(r, b).total_cmp(&graph.lp(r, a)).then(a.cmp(&b)));
            ids
        })
        .collect();

    let mut pool: Vec<Hypothesis> = Vec::new();
    for end in 0..graph.l_max() {
        pool.extend(top_n_ending_at(graph, &sorted_rows, end, n));
    }
    pool.sort_by(|a, b| rank_order((a.nar_score, &a.tokens), (b.nar_score, &b.tokens)));
    pool.truncate(n);
    pool
}

/// Best-first enumeration of the top `n` length-`end` paths (EOS at row `end`).
fn top_n_ending_at(
    graph: &ProbGraph,
    sorted_rows: &[Vec<u32>],
    end: usize,
    n: usize,
) -> Vec<Hypothesis> {
    let eos_lp = graph.lp(end, Vocab::EOS);
    if end == 0 {
        return vec![Hypothesis {
            tokens: Vec::new(),
            nar_score: eos_lp,
            ar_score: None,
        }];
    }
    let width = sorted_rows[0].len() as u32;
    let make = |picks: &[u32]| -> HeapState {
        let tokens: Vec<u32> = picks
            .iter()
            .enumerate()
            .map(|(r, &p)| sorted_rows[r][p as usize])
            .collect();
        // fresh left-to-right sum, so scores are bit-identical to a direct
        // evaluation of the same path
        let sum: f64 = tokens
            .iter()
            .enumerate()
            .map(|(r, &t)| graph.lp(r, t))
            .sum::<f64>()
            + eos_lp;
        HeapState {
            sum,
            picks: picks.to_vec(),
            tokens,
        }
    };

    let mut heap = BinaryHeap::new();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let first = vec![0u32; end];
    seen.insert(first.clone());
    heap.push(make(&first));

    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let Some(state) = heap.pop() else { break };
        for r in 0..end {
            if state.picks[r] + 1 < width {
                let mut next = state.picks.clone();
                next[r] += 1;
                if seen.insert(next.clone()) {
                    heap.push(make(&next));
                }
            }
        }
        out.push(Hypothesis {
            tokens: state.tokens,
            nar_score: state.sum / (end as f64 + 1.0),
            ar_score: None,
        });
    }
    out
}
