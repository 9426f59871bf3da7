//! Dual-forward joint training: the encoder runs once per batch, the decoder
//! twice (AR with a causal mask, NAR without), and the losses combine as
//! (1−α)·L_NAR + α·L_AR.

mod batch;
mod checkpoint;
mod optim;

pub use batch::{assemble_batch, build_batches, make_ar_pair, make_nar_pair, AugmentConfig, Batch};
pub use checkpoint::{
    average_checkpoint_files, average_checkpoints, checkpoint_from_bytes, checkpoint_to_bytes,
    load_checkpoint, save_checkpoint, Checkpoint,
};
pub use optim::{noam_lr, Adam};

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Corpus, DataError, Vocab};
use crate::model::{DecodeMode, FwdCtx, Model, ModelError};
use crate::tape::NodeId;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("targets must be non-empty")]
    EmptyTargets,
    #[error("targets contain special token id {0}")]
    SpecialInTargets(u32),
    #[error("step must be >= 1 for the Noam schedule")]
    ZeroStep,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the AR loss in the joint objective.
    pub alpha: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// How many trailing per-epoch checkpoints the final average covers.
    pub avg_last_k: usize,
    pub lr_scale: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.7,
            warmup_steps: 1000,
            epochs: 15,
            batch_size: 8,
            avg_last_k: 5,
            lr_scale: 1.0,
            seed: 17,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::InvalidConfig(format!(
                "train.alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.warmup_steps == 0 {
            return Err(TrainError::InvalidConfig("train.warmup_steps must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        if self.avg_last_k == 0 || self.avg_last_k > self.epochs {
            return Err(TrainError::InvalidConfig(
                "train.avg_last_k must lie in [1, epochs]".into(),
            ));
        }
        if self.lr_scale < 0.0 {
            return Err(TrainError::InvalidConfig("train.lr_scale must be >= 0".into()));
        }
        Ok(())
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^ (z >> 32)
}

/// The combined loss and its components, as live tape nodes.
pub struct JointLossNodes {
    pub loss: NodeId,
    pub ar: NodeId,
    pub nar: NodeId,
}

/// One encoder pass, two decoder passes, PAD-ignoring cross-entropies, and
/// the weighted combination (1−α)·L_NAR + α·L_AR. At α = 0 or 1 the
/// combination reproduces the pure-mode loss bit-exactly.
pub fn joint_loss(
    model: &Model,
    ctx: &mut FwdCtx,
    batch: &Batch,
    alpha: f64,
) -> Result<JointLossNodes, TrainError> {
    let b = batch.size();
    let (encoded, enc_lens) =
        model.encode_batch(ctx, &batch.feats, b, batch.t_max, &batch.frame_lens)?;
    let (ar_logits, _) = model.decoder_forward_batch(
        ctx,
        &batch.ar_inputs,
        b,
        batch.l_ar,
        Some(&batch.target_lens),
        encoded,
        Some(&enc_lens),
        DecodeMode::Ar,
    )?;
    let ar = ctx.tape.cross_entropy(ar_logits, &batch.ar_targets, Vocab::PAD)?;
    let (nar_logits, _) = model.decoder_forward_batch(
        ctx,
        &batch.nar_inputs,
        b,
        batch.l_nar,
        Some(&batch.target_lens),
        encoded,
        Some(&enc_lens),
        DecodeMode::Nar,
    )?;
    let nar = ctx.tape.cross_entropy(nar_logits, &batch.nar_targets, Vocab::PAD)?;

    let weighted_nar = ctx.tape.scale(nar, 1.0 - alpha);
    let weighted_ar = ctx.tape.scale(ar, alpha);
    let loss = ctx.tape.add(weighted_nar, weighted_ar)?;
    Ok(JointLossNodes { loss, ar, nar })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub l_ar: f64,
    pub l_nar: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

/// One pass over the corpus in seeded-shuffled batch order: masking, dual
/// forward, backward, Adam step under the Noam schedule. Aborts on a
/// non-finite loss.
pub fn train_epoch(
    model: &mut Model,
    corpus: &Corpus,
    adam: &mut Adam,
    cfg: &TrainConfig,
    epoch: usize,
    global_step: &mut u64,
) -> Result<EpochMetrics, TrainError> {
    let start = Instant::now();
    let batches = build_batches(corpus, cfg.batch_size);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1000 + epoch as u64));
    order.shuffle(&mut shuffle_rng);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x2000 + epoch as u64));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x3000 + epoch as u64));

    let (mut sum_loss, mut sum_ar, mut sum_nar) = (0.0, 0.0, 0.0);
    let mut last_lr = 0.0;
    for &bi in &order {
        let batch = assemble_batch(
            corpus,
            &batches[bi],
            model.cfg.max_decode_len,
            Some((cfg.augment, &mut aug_rng)),
        )?;
        model.params.zero_grads();
        let grads;
        let (loss_v, ar_v, nar_v);
        {
            let mut ctx = FwdCtx::train(&model.params, model.cfg.dropout, &mut drop_rng);
            let nodes = joint_loss(&*model, &mut ctx, &batch, cfg.alpha)?;
            loss_v = ctx.tape.scalar_value(nodes.loss);
            ar_v = ctx.tape.scalar_value(nodes.ar);
            nar_v = ctx.tape.scalar_value(nodes.nar);
            if !loss_v.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: *global_step + 1,
                });
            }
            ctx.tape.backward(nodes.loss)?;
            grads = ctx.collect_grads();
        }
        for (pid, g) in grads {
            model.params.get_mut(pid).accumulate_grad(&g);
        }
        *global_step += 1;
        last_lr = noam_lr(*global_step, model.cfg.d_model, cfg.warmup_steps, cfg.lr_scale)?;
        adam.step(&mut model.params, last_lr);

        sum_loss += loss_v;
        sum_ar += ar_v;
        sum_nar += nar_v;
    }
    let n = order.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        loss: sum_loss / n,
        l_ar: sum_ar / n,
        l_nar: sum_nar / n,
        lr: last_lr,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Mean of the last `avg_last_k` per-epoch checkpoints.
    pub averaged: Checkpoint,
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<(), TrainError> {
    let new = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(DataError::Io)?;
    if new {
        writeln!(file, "epoch,loss,l_ar,l_nar,lr,wall_secs").map_err(DataError::Io)?;
    }
    writeln!(
        file,
        "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.3}",
        m.epoch, m.loss, m.l_ar, m.l_nar, m.lr, m.wall_secs
    )
    .map_err(DataError::Io)?;
    Ok(())
}

/// Full training run: per-epoch checkpoints (when a directory is given),
/// append-only metrics CSV, and the trailing-K parameter average.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut adam = Adam::new(&model.params);
    let mut global_step = 0u64;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut recent: VecDeque<Checkpoint> = VecDeque::with_capacity(cfg.avg_last_k);
    for epoch in 1..=cfg.epochs {
        let m = train_epoch(model, corpus, &mut adam, cfg, epoch, &mut global_step)?;
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join(format!("epoch_{epoch:04}.ckpt")), model)?;
        }
        if let Some(path) = metrics_path {
            append_metrics(path, &m)?;
        }
        metrics.push(m);
        if recent.len() == cfg.avg_last_k {
            recent.pop_front();
        }
        recent.push_back(Checkpoint::of(model));
    }
    let averaged = average_checkpoints(recent.make_contiguous())?;
    if let Some(dir) = checkpoint_dir {
        std::fs::write(dir.join("averaged.ckpt"), checkpoint_to_bytes(&averaged))
            .map_err(DataError::Io)?;
    }
    Ok(TrainOutcome { metrics, averaged })
}
