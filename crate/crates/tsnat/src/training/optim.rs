//! Noam learning-rate schedule and Adam.

use crate::model::ParamStore;

use super::TrainError;

/// lr = scale · d_model^(-1/2) · min(step^(-1/2), step · warmup^(-3/2)).
/// Peaks exactly at step == warmup.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, scale: f64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::ZeroStep);
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam with the transformer-recipe constants (β1 0.9, β2 0.98, ε 1e-9).
/// The learning rate arrives per step from the schedule.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently held by the parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..self.m.len() {
            let tensor = store.get_mut(crate::model::ParamId(i));
            let n = tensor.numel();
            // split borrows: read grad, write data
            let grad = tensor.grad().expect("parameters carry grad buffers").to_vec();
            let data = tensor.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..n {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn noam_rejects_step_zero() {
        assert!(matches!(noam_lr(0, 64, 100, 1.0), Err(TrainError::ZeroStep)));
    }

    #[test]
    fn noam_peaks_exactly_at_warmup() {
        let w = 1000;
        let peak = noam_lr(w, 64, w, 1.0).unwrap();
        assert!(noam_lr(w - 1, 64, w, 1.0).unwrap() < peak);
        assert!(noam_lr(w + 1, 64, w, 1.0).unwrap() < peak);
    }

    #[test]
    fn noam_halving_ratio() {
        let w = 1000;
        let r = noam_lr(2 * w, 64, w, 1.0).unwrap() / noam_lr(w, 64, w, 1.0).unwrap();
        assert!((r - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn noam_monotone_up_then_down() {
        let w = 50u64;
        let mut prev = noam_lr(1, 64, w, 1.0).unwrap();
        for step in 2..=4 * w {
            let lr = noam_lr(step, 64, w, 1.0).unwrap();
            if step <= w {
                assert!(lr > prev, "step {step} should still rise");
            } else {
                assert!(lr < prev, "step {step} should decay");
            }
            prev = lr;
        }
    }

    #[test]
    fn adam_moves_parameters_against_gradients() {
        let cfg = ModelConfig::toy(8, 4, 4);
        let mut model = Model::new(cfg, 0).unwrap();
        let before: Vec<f64> = model.params.get(crate::model::ParamId(0)).data().to_vec();
        // put a constant gradient on every parameter
        for i in 0..model.params.len() {
            let t = model.params.get_mut(crate::model::ParamId(i));
            let n = t.numel();
            t.accumulate_grad(&vec![1.0; n]);
        }
        let mut adam = Adam::new(&model.params);
        adam.step(&mut model.params, 1e-3);
        let after = model.params.get(crate::model::ParamId(0)).data();
        for (b, a) in before.iter().zip(after) {
            assert!(a < b, "positive gradient must push the value down");
        }
    }
}
