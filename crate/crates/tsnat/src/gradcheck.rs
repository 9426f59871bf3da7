//! Numerical gradient checking: central finite differences against the tape.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error between an analytic and a numeric derivative. Differences
/// below 1e-7 are treated as zero so that true-zero gradients compare clean
/// against finite-difference noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-7 {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Check the gradients `build` produces for every element of every input.
///
/// `build` must assemble a deterministic scalar loss from leaves registered
/// for `inputs` (in order); it is re-invoked on a fresh tape for every probe,
/// so any internal randomness must be re-seeded inside the closure.
pub fn check_grads(
    inputs: &[Tensor],
    h: f64,
    mut build: impl FnMut(&mut Tape, &[NodeId]) -> NodeId,
) -> GradReport {
    let eval = |data: &[Vec<f64>], build: &mut dyn FnMut(&mut Tape, &[NodeId]) -> NodeId| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(data)
            .map(|(t, d)| tape.leaf(t.shape(), d, false))
            .collect();
        let loss = build(&mut tape, &ids);
        tape.scalar_value(loss)
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.shape(), t.data(), true))
        .collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect();
    drop(tape);

    let mut data: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for ti in 0..inputs.len() {
        for ei in 0..data[ti].len() {
            let orig = data[ti][ei];
            data[ti][ei] = orig + h;
            let f_plus = eval(&data, &mut build);
            data[ti][ei] = orig - h;
            let f_minus = eval(&data, &mut build);
            data[ti][ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let e = rel_err(analytic[ti][ei], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            report.checked += 1;
        }
    }
    report
}
