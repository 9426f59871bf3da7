//! Checkpoints: named parameter tensors plus the model config, in a versioned
//! binary container, with elementwise averaging over the last K epochs.

use std::fs;
use std::path::Path;

use crate::data::io::{push_string, push_u32, ByteReader};
use crate::data::DataError;
use crate::model::{FrontendKind, Model, ModelConfig};
use crate::tensor::Tensor;

use super::TrainError;

const MAGIC: &[u8; 4] = b"TSNK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn of(model: &Model) -> Self {
        Checkpoint {
            cfg: model.cfg.clone(),
            params: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model, TrainError> {
        Ok(Model::from_saved(self.cfg, &self.params)?)
    }
}

fn push_config(out: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.n_enc_layers,
        cfg.n_dec_layers,
        cfg.d_model,
        cfg.d_ff,
        cfg.n_heads,
        cfg.vocab_size,
        cfg.max_decode_len,
        cfg.feature_dim,
    ] {
        push_u32(out, v as u32);
    }
    out.push(match cfg.frontend {
        FrontendKind::Conv => 0,
        FrontendKind::LinearSplice => 1,
    });
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
}

fn read_config(r: &mut ByteReader) -> Result<ModelConfig, DataError> {
    let mut vals = [0usize; 8];
    for v in &mut vals {
        *v = r.u32()? as usize;
    }
    let kind_offset = r.take(1)?;
    let frontend = match kind_offset[0] {
        0 => FrontendKind::Conv,
        1 => FrontendKind::LinearSplice,
        k => {
            return Err(DataError::Parse {
                offset: 0,
                what: format!("unknown frontend kind {k}"),
            })
        }
    };
    let dropout = r.f64()?;
    Ok(ModelConfig {
        n_enc_layers: vals[0],
        n_dec_layers: vals[1],
        d_model: vals[2],
        d_ff: vals[3],
        n_heads: vals[4],
        vocab_size: vals[5],
        max_decode_len: vals[6],
        feature_dim: vals[7],
        frontend,
        dropout,
    })
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_config(&mut out, &ckpt.cfg);
    push_u32(&mut out, ckpt.params.len() as u32);
    for (name, t) in &ckpt.params {
        push_string(&mut out, name);
        push_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            push_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint, DataError> {
    let mut r = ByteReader::new(buf);
    if r.take(4)? != MAGIC {
        return Err(DataError::WrongFormat { expected: "checkpoint" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let cfg = read_config(&mut r)?;
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        params.push((name, Tensor::new(shape, data).expect("consistent dims")));
    }
    if !r.done() {
        return Err(DataError::Parse {
            offset: buf.len(),
            what: "trailing bytes after checkpoint payload".into(),
        });
    }
    Ok(Checkpoint { cfg, params })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<(), TrainError> {
    fs::write(path, checkpoint_to_bytes(&Checkpoint::of(model))).map_err(DataError::Io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Ok(checkpoint_from_bytes(&fs::read(path).map_err(DataError::Io)?)?)
}

/// Elementwise mean of the parameters across checkpoints. Configs and
/// parameter names/shapes must agree. Computed as x₀ + Σ(xᵢ − x₀)/K so that
/// averaging K copies of one checkpoint returns it bit-exactly.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint, TrainError> {
    let first = ckpts
        .first()
        .ok_or_else(|| TrainError::Checkpoint("no checkpoints to average".into()))?;
    for c in &ckpts[1..] {
        if c.cfg != first.cfg {
            return Err(TrainError::Checkpoint("config mismatch between checkpoints".into()));
        }
        if c.params.len() != first.params.len()
            || c.params
                .iter()
                .zip(&first.params)
                .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
        {
            return Err(TrainError::Checkpoint(
                "parameter names/shapes differ between checkpoints".into(),
            ));
        }
    }
    let k = ckpts.len() as f64;
    let params = first
        .params
        .iter()
        .enumerate()
        .map(|(pi, (name, base))| {
            let mut data = base.data().to_vec();
            for (j, v) in data.iter_mut().enumerate() {
                let mut delta = 0.0;
                for c in ckpts {
                    delta += c.params[pi].1.data()[j] - *v;
                }
                *v += delta / k;
            }
            (name.clone(), Tensor::new(base.shape().to_vec(), data).unwrap())
        })
        .collect();
    Ok(Checkpoint {
        cfg: first.cfg.clone(),
        params,
    })
}

pub fn average_checkpoint_files(paths: &[std::path::PathBuf]) -> Result<Checkpoint, TrainError> {
    let ckpts = paths
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    average_checkpoints(&ckpts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> Model {
        Model::new(ModelConfig::toy(9, 4, 6), seed).unwrap()
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let m = model(1);
        let ckpt = Checkpoint::of(&m);
        let bytes = checkpoint_to_bytes(&ckpt);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.cfg, ckpt.cfg);
        for ((na, ta), (nb, tb)) in ckpt.params.iter().zip(&back.params) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        // and the reloaded model serializes to identical bytes
        let m2 = back.into_model().unwrap();
        assert_eq!(checkpoint_to_bytes(&Checkpoint::of(&m2)), bytes);
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let ckpt = Checkpoint::of(&model(2));
        let avg = average_checkpoints(&[ckpt.clone(), ckpt.clone(), ckpt.clone()]).unwrap();
        for ((_, t), (_, a)) in ckpt.params.iter().zip(&avg.params) {
            assert_eq!(t.data(), a.data());
        }
    }

    #[test]
    fn averaging_p_and_negated_p_is_zero() {
        let ckpt = Checkpoint::of(&model(3));
        let mut neg = ckpt.clone();
        for (_, t) in &mut neg.params {
            let shape = t.shape().to_vec();
            let data: Vec<f64> = t.data().iter().map(|v| -v).collect();
            *t = Tensor::new(shape, data).unwrap();
        }
        let avg = average_checkpoints(&[ckpt, neg]).unwrap();
        for (_, t) in &avg.params {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn averaging_two_checkpoints_is_the_mean() {
        let a = Checkpoint::of(&model(4));
        let b = Checkpoint::of(&model(5));
        let avg = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
        for i in 0..avg.params.len() {
            for j in 0..avg.params[i].1.numel() {
                let expect = (a.params[i].1.data()[j] + b.params[i].1.data()[j]) / 2.0;
                let got = avg.params[i].1.data()[j];
                let denom = expect.abs().max(1.0);
                assert!(((got - expect) / denom).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let a = Checkpoint::of(&model(6));
        let other = Model::new(ModelConfig::toy(10, 4, 6), 6).unwrap();
        let b = Checkpoint::of(&other);
        assert!(matches!(
            average_checkpoints(&[a, b]),
            Err(TrainError::Checkpoint(_))
        ));
    }
}
