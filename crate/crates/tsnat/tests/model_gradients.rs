//! Finite-difference verification of the full forward path: every parameter
//! of a micro model is perturbed and compared against the tape's gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsnat::data::{generate_corpus, TaskConfig};
use tsnat::gradcheck::rel_err;
use tsnat::model::{FrontendKind, FwdCtx, Model, ModelConfig, ParamId};
use tsnat::training::{assemble_batch, joint_loss, Batch};

fn micro_setup(frontend: FrontendKind) -> (Model, Batch) {
    let task = TaskConfig {
        vocab_size: 3,
        feature_dim: 3,
        min_len: 2,
        max_len: 3,
        min_dur: 2,
        max_dur: 3,
        noise_sigma: 0.2,
        seed: 5,
    };
    let corpus = generate_corpus(&task, 3);
    let cfg = ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 8,
        d_ff: 6,
        n_heads: 2,
        vocab_size: corpus.vocab.size(),
        max_decode_len: 5,
        frontend,
        feature_dim: 3,
        dropout: 0.0,
    };
    let model = Model::new(cfg, 12).unwrap();
    let batch = assemble_batch(&corpus, &[0, 1, 2], 5, None).unwrap();
    (model, batch)
}

fn loss_value(model: &Model, batch: &Batch, alpha: f64) -> f64 {
    let mut ctx = FwdCtx::eval(&model.params);
    let nodes = joint_loss(model, &mut ctx, batch, alpha).unwrap();
    ctx.tape.scalar_value(nodes.loss)
}

fn check_every_parameter(frontend: FrontendKind) -> (usize, f64) {
    let (mut model, batch) = micro_setup(frontend);
    let alpha = 0.6;
    let h = 1e-5;

    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut ctx = FwdCtx::eval(&model.params);
        let nodes = joint_loss(&model, &mut ctx, &batch, alpha).unwrap();
        ctx.tape.backward(nodes.loss).unwrap();
        ctx.collect_grads()
    };
    assert_eq!(analytic.len(), model.params.len(), "every parameter is touched");

    let mut checked = 0usize;
    let mut max_err: f64 = 0.0;
    let mut _worst = String::new();
    for (pid, grad) in &analytic {
        for j in 0..grad.len() {
            let orig = model.params.get(*pid).data()[j];
            model.params.get_mut(*pid).data_mut()[j] = orig + h;
            let up = loss_value(&model, &batch, alpha);
            model.params.get_mut(*pid).data_mut()[j] = orig - h;
            let down = loss_value(&model, &batch, alpha);
            model.params.get_mut(*pid).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(grad[j], numeric);
            if e > max_err {
                max_err = e;
                _worst = format!(
                    "{} [{j}]: analytic {} vs numeric {numeric}",
                    model.params.name(*pid),
                    grad[j]
                );
            }
            checked += 1;
        }
    }
    assert!(max_err < 1e-4, "max rel err {max_err} at {_worst}");
    (checked, max_err)
}

#[test]
fn conv_model_gradients_match_finite_differences() {
    let (checked, max_err) = check_every_parameter(FrontendKind::Conv);
    println!("checked {checked} parameter elements, max rel err {max_err:.3e}");
    assert!(checked > 1000);
}

#[test]
fn splice_model_gradients_match_finite_differences() {
    let (checked, max_err) = check_every_parameter(FrontendKind::LinearSplice);
    println!("checked {checked} parameter elements, max rel err {max_err:.3e}");
    assert!(checked > 1000);
}
