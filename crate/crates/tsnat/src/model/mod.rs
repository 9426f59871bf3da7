//! The network: front end, acoustic encoder, and the dual-mode transformer
//! decoder whose self-attention mask is optional — causal in AR mode, absent
//! in NAR mode — with every parameter shared between the two modes.

mod attention;
mod decoder;
mod encoder;
mod frontend;

pub use attention::multi_head_attention;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Vocab;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("utterance too short: {t} frames, the {kind} front end needs at least {min}")]
    UtteranceTooShort {
        t: usize,
        min: usize,
        kind: &'static str,
    },
    #[error("AR decoder input must begin with <BOS>")]
    ArInputMissingBos,
    #[error("NAR decoder input must be <MASK> at every live position")]
    NarInputNotMask,
    #[error("checkpoint parameter mismatch: expected {expected}, found {found}")]
    CheckpointMismatch { expected: String, found: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which self-attention regime the decoder runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Strictly causal self-attention; input starts with `<BOS>`.
    Ar,
    /// No self-attention mask; input is all `<MASK>`.
    Nar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontendKind {
    /// Two time-axis convolutions (kernel 3, stride 2, ReLU) then a projection.
    Conv,
    /// Concatenate 4 consecutive frames with stride 4, then project.
    LinearSplice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    /// GLU output width of the feed-forward block (the pre-GLU hidden is 2×this).
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// L_max: fixed NAR decode length at inference.
    pub max_decode_len: usize,
    pub frontend: FrontendKind,
    pub feature_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale preset used by the trend experiments.
    pub fn toy(vocab_size: usize, feature_dim: usize, max_decode_len: usize) -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            vocab_size,
            max_decode_len,
            frontend: FrontendKind::Conv,
            feature_dim,
            dropout: 0.1,
        }
    }

    pub fn small(vocab_size: usize, feature_dim: usize, max_decode_len: usize) -> Self {
        ModelConfig {
            n_enc_layers: 12,
            n_dec_layers: 6,
            d_model: 384,
            d_ff: 384,
            n_heads: 4,
            vocab_size,
            max_decode_len,
            frontend: FrontendKind::Conv,
            feature_dim,
            dropout: 0.1,
        }
    }

    pub fn middle(vocab_size: usize, feature_dim: usize, max_decode_len: usize) -> Self {
        ModelConfig {
            d_model: 512,
            d_ff: 512,
            ..Self::small(vocab_size, feature_dim, max_decode_len)
        }
    }

    pub fn big(vocab_size: usize, feature_dim: usize, max_decode_len: usize) -> Self {
        ModelConfig {
            d_model: 512,
            d_ff: 512,
            ..Self::small(vocab_size, feature_dim, max_decode_len)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(ModelError::InvalidConfig("d_ff must be >= 1".into()));
        }
        if self.max_decode_len < 2 {
            return Err(ModelError::InvalidConfig("max_decode_len must be >= 2".into()));
        }
        if self.vocab_size <= Vocab::N_SPECIALS as usize {
            return Err(ModelError::InvalidConfig(
                "vocab_size must exceed the 5 specials".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sine-cosine positional encoding: PE[t,2i] = sin(t/10000^(2i/d)),
/// PE[t,2i+1] = cos(t/10000^(2i/d)). Returned row-major [length, d_model].
pub fn positional_encoding(length: usize, d_model: usize) -> Vec<f64> {
    assert!(length >= 1 && d_model >= 1);
    let mut pe = vec![0.0; length * d_model];
    for t in 0..length {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[t * d_model + 2 * i] = (t as f64 * rate).sin();
            pe[t * d_model + 2 * i + 1] = (t as f64 * rate).cos();
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[t * d_model + 2 * i] = (t as f64 * rate).sin();
        }
    }
    pe
}

// ── Parameter store ─────────────────────────────────────────────────────────

/// Index of a named parameter in the store. Stable across forwards; the
/// checkpoint format preserves insertion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

// ── Typed parameter handles ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct MhaP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnP {
    pub expand: LinearP,
    pub contract: LinearP,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum FrontendP {
    Conv {
        conv1: LinearP,
        conv2: LinearP,
        proj: LinearP,
    },
    Splice { proj: LinearP },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerP {
    pub self_attn: MhaP,
    pub norm1: NormP,
    pub ffn: FfnP,
    pub norm2: NormP,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerP {
    pub self_attn: MhaP,
    pub norm1: NormP,
    pub cross_attn: MhaP,
    pub norm2: NormP,
    pub ffn: FfnP,
    pub norm3: NormP,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelParams {
    pub frontend: FrontendP,
    pub enc: Vec<EncLayerP>,
    pub dec: Vec<DecLayerP>,
    pub tok_embed: ParamId,
    pub out: LinearP,
}

enum ParamSource<'a> {
    Init(ChaCha8Rng),
    Loaded(std::slice::Iter<'a, (String, Tensor)>),
}

struct Builder<'a> {
    store: ParamStore,
    source: ParamSource<'a>,
}

impl<'a> Builder<'a> {
    fn fetch(
        &mut self,
        name: String,
        shape: &[usize],
        init: impl FnOnce(&mut ChaCha8Rng) -> Tensor,
    ) -> Result<ParamId, ModelError> {
        let tensor = match &mut self.source {
            ParamSource::Init(rng) => {
                let t = init(rng);
                debug_assert_eq!(t.shape(), shape);
                t
            }
            ParamSource::Loaded(iter) => {
                let (got_name, t) = iter.next().ok_or_else(|| ModelError::CheckpointMismatch {
                    expected: name.clone(),
                    found: "end of checkpoint".into(),
                })?;
                if *got_name != name || t.shape() != shape {
                    return Err(ModelError::CheckpointMismatch {
                        expected: format!("{name} {shape:?}"),
                        found: format!("{got_name} {:?}", t.shape()),
                    });
                }
                t.clone()
            }
        };
        Ok(self.store.add(name, tensor))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<LinearP, ModelError> {
        let w = self.fetch(format!("{prefix}.w"), &[fan_in, fan_out], |rng| {
            Tensor::xavier(fan_in, fan_out, rng)
        })?;
        let b = self.fetch(format!("{prefix}.b"), &[fan_out], |_| Tensor::zeros(vec![fan_out]))?;
        Ok(LinearP { w, b })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormP, ModelError> {
        let gamma = self.fetch(format!("{prefix}.gamma"), &[d], |_| {
            Tensor::new(vec![d], vec![1.0; d]).unwrap()
        })?;
        let beta = self.fetch(format!("{prefix}.beta"), &[d], |_| Tensor::zeros(vec![d]))?;
        Ok(NormP { gamma, beta })
    }

    fn mha(&mut self, prefix: &str, d: usize) -> Result<MhaP, ModelError> {
        Ok(MhaP {
            q: self.linear(&format!("{prefix}.q"), d, d)?,
            k: self.linear(&format!("{prefix}.k"), d, d)?,
            v: self.linear(&format!("{prefix}.v"), d, d)?,
            o: self.linear(&format!("{prefix}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> Result<FfnP, ModelError> {
        Ok(FfnP {
            expand: self.linear(&format!("{prefix}.expand"), d, 2 * d_ff)?,
            contract: self.linear(&format!("{prefix}.contract"), d_ff, d)?,
        })
    }
}

fn build_params(cfg: &ModelConfig, source: ParamSource) -> Result<(ParamStore, ModelParams), ModelError> {
    let mut b = Builder {
        store: ParamStore::default(),
        source,
    };
    let (d, f) = (cfg.d_model, cfg.feature_dim);
    let frontend = match cfg.frontend {
        FrontendKind::Conv => FrontendP::Conv {
            conv1: b.linear("frontend.conv1", 3 * f, d)?,
            conv2: b.linear("frontend.conv2", 3 * d, d)?,
            proj: b.linear("frontend.proj", d, d)?,
        },
        FrontendKind::LinearSplice => FrontendP::Splice {
            proj: b.linear("frontend.proj", 4 * f, d)?,
        },
    };
    let enc = (0..cfg.n_enc_layers)
        .map(|i| {
            Ok(EncLayerP {
                self_attn: b.mha(&format!("enc.{i}.self"), d)?,
                norm1: b.norm(&format!("enc.{i}.norm1"), d)?,
                ffn: b.ffn(&format!("enc.{i}.ffn"), d, cfg.d_ff)?,
                norm2: b.norm(&format!("enc.{i}.norm2"), d)?,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let dec = (0..cfg.n_dec_layers)
        .map(|i| {
            Ok(DecLayerP {
                self_attn: b.mha(&format!("dec.{i}.self"), d)?,
                norm1: b.norm(&format!("dec.{i}.norm1"), d)?,
                cross_attn: b.mha(&format!("dec.{i}.cross"), d)?,
                norm2: b.norm(&format!("dec.{i}.norm2"), d)?,
                ffn: b.ffn(&format!("dec.{i}.ffn"), d, cfg.d_ff)?,
                norm3: b.norm(&format!("dec.{i}.norm3"), d)?,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let v = cfg.vocab_size;
    let tok_embed = b.fetch("embed".into(), &[v, d], |rng| {
        Tensor::randn(vec![v, d], (d as f64).powf(-0.5), rng)
    })?;
    let out = b.linear("out", d, v)?;
    if let ParamSource::Loaded(mut iter) = b.source {
        if let Some((name, _)) = iter.next() {
            return Err(ModelError::CheckpointMismatch {
                expected: "end of checkpoint".into(),
                found: name.clone(),
            });
        }
    }
    Ok((
        b.store,
        ModelParams {
            frontend,
            enc,
            dec,
            tok_embed,
            out,
        },
    ))
}

// ── Attention record ────────────────────────────────────────────────────────

/// Attention weights captured from the most recent decoder pass, one
/// [B, H, Tq, Tk] tensor per layer.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub self_attn: Vec<Tensor>,
    pub cross_attn: Vec<Tensor>,
}

impl AttentionRecord {
    /// Head-averaged weights of one recorded tensor for batch element 0,
    /// returned as (rows, cols, data).
    pub fn head_mean(t: &Tensor) -> (usize, usize, Vec<f64>) {
        let s = t.shape();
        let (h, tq, tk) = (s[1], s[2], s[3]);
        let mut out = vec![0.0; tq * tk];
        for hi in 0..h {
            let off = hi * tq * tk;
            for (o, v) in out.iter_mut().zip(&t.data()[off..off + tq * tk]) {
                *o += v / h as f64;
            }
        }
        (tq, tk, out)
    }
}

// ── Forward context ─────────────────────────────────────────────────────────

/// Per-forward state: the tape, lazily registered parameter leaves, dropout,
/// and the attention-recording switch.
pub struct FwdCtx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    nodes: Vec<Option<NodeId>>,
    dropout_p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
    pub record_attn: bool,
}

impl<'a> FwdCtx<'a> {
    /// Evaluation context: no dropout, no recording.
    pub fn eval(store: &'a ParamStore) -> Self {
        FwdCtx {
            tape: Tape::new(),
            store,
            nodes: vec![None; store.len()],
            dropout_p: 0.0,
            rng: None,
            record_attn: false,
        }
    }

    /// Training context with the configured dropout.
    pub fn train(store: &'a ParamStore, dropout_p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        FwdCtx {
            tape: Tape::new(),
            store,
            nodes: vec![None; store.len()],
            dropout_p,
            rng: Some(rng),
            record_attn: false,
        }
    }

    /// Tape node for a parameter, registered on first use in this forward.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let n = self.tape.leaf_tensor(self.store.get(id));
        self.nodes[id.0] = Some(n);
        n
    }

    /// The set of parameters this forward actually used.
    pub fn touched(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|_| ParamId(i)))
            .collect()
    }

    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        if self.dropout_p == 0.0 {
            return x;
        }
        let rng = self.rng.as_mut().expect("train ctx has an rng");
        self.tape.dropout(x, self.dropout_p, rng)
    }

    /// Copy tape gradients of the touched parameters out of the tape.
    pub fn collect_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.and_then(|node| self.tape.grad(node).map(|g| (ParamId(i), g.to_vec())))
            })
            .collect()
    }
}

// ── The model ───────────────────────────────────────────────────────────────

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub(crate) handles: ModelParams,
    encoder_passes: AtomicU64,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, handles) = build_params(&cfg, ParamSource::Init(rng))?;
        Ok(Model {
            cfg,
            params,
            handles,
            encoder_passes: AtomicU64::new(0),
        })
    }

    /// Rebuild a model from checkpoint parameters, which must appear in the
    /// exact order and shapes the config implies.
    pub fn from_saved(cfg: ModelConfig, saved: &[(String, Tensor)]) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (params, handles) = build_params(&cfg, ParamSource::Loaded(saved.iter()))?;
        Ok(Model {
            cfg,
            params,
            handles,
            encoder_passes: AtomicU64::new(0),
        })
    }

    /// How many encoder forwards have run (training instrumentation).
    pub fn encoder_pass_count(&self) -> u64 {
        self.encoder_passes.load(Ordering::Relaxed)
    }

    pub(crate) fn note_encoder_pass(&self) {
        self.encoder_passes.fetch_add(1, Ordering::Relaxed);
    }
}

// ── Attention masks ─────────────────────────────────────────────────────────

/// Strictly causal [len, len] additive mask replicated `batch` times.
pub(crate) fn causal_mask(batch: usize, len: usize) -> Vec<f64> {
    let mut one = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            one[i * len + j] = f64::NEG_INFINITY;
        }
    }
    let mut out = Vec::with_capacity(batch * len * len);
    for _ in 0..batch {
        out.extend_from_slice(&one);
    }
    out
}

/// Key-padding mask [B, tq, tk]: key j of batch b is blocked when j >= lens[b].
pub(crate) fn key_pad_mask(tq: usize, tk: usize, lens: &[usize]) -> Option<Vec<f64>> {
    if lens.iter().all(|&l| l >= tk) {
        return None;
    }
    let mut out = vec![0.0; lens.len() * tq * tk];
    for (b, &l) in lens.iter().enumerate() {
        for q in 0..tq {
            for k in l..tk {
                out[(b * tq + q) * tk + k] = f64::NEG_INFINITY;
            }
        }
    }
    Some(out)
}
