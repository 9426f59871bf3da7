//! Multi-head attention with an optional causal mask and optional key-padding.

use crate::tape::NodeId;
use crate::tensor::{Tensor, TensorError};

use super::{causal_mask, FwdCtx, LinearP, MhaP, ModelError};

pub(crate) fn linear(ctx: &mut FwdCtx, x: NodeId, p: &LinearP) -> Result<NodeId, TensorError> {
    let w = ctx.p(p.w);
    let b = ctx.p(p.b);
    let h = ctx.tape.matmul(x, w)?;
    ctx.tape.add_bias(h, b)
}

/// Output of one attention call: the projected result and the pre-dropout
/// attention weights node shaped [B, H, Tq, Tk].
pub struct MhaOutput {
    pub out: NodeId,
    pub weights: NodeId,
}

/// Per-head scaled dot-product attention (1/√d_k), heads concatenated, then
/// output-projected. `q_in` is [B,Tq,d]; `k_in`/`v_in` are [B,Tk,d].
/// `pad_mask`, when given, is additive [B,Tq,Tk]; `causal` additionally blocks
/// keys beyond each query position and requires Tq == Tk.
pub fn multi_head_attention(
    ctx: &mut FwdCtx,
    p: &MhaP,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    n_heads: usize,
    causal: bool,
    pad_mask: Option<&[f64]>,
) -> Result<MhaOutput, ModelError> {
    let qs = ctx.tape.shape(q_in).to_vec();
    let ks = ctx.tape.shape(k_in).to_vec();
    debug_assert_eq!(qs.len(), 3);
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    debug_assert_eq!(d % n_heads, 0);
    let dk = d / n_heads;

    let to_heads = |ctx: &mut FwdCtx, x: NodeId, t: usize| -> Result<NodeId, TensorError> {
        let r = ctx.tape.reshape(x, &[b, t, n_heads, dk])?;
        ctx.tape.permute(r, &[0, 2, 1, 3])
    };

    let q = linear(ctx, q_in, &p.q)?;
    let k = linear(ctx, k_in, &p.k)?;
    let v = linear(ctx, v_in, &p.v)?;
    let q = to_heads(ctx, q, tq)?;
    let k = to_heads(ctx, k, tk)?;
    let v = to_heads(ctx, v, tk)?;

    let scores = ctx.tape.matmul_nt(q, k)?;
    let scores = ctx.tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let mask = combined_mask(b, tq, tk, causal, pad_mask);
    let scores = match &mask {
        Some(m) => ctx.tape.add_mask(scores, m),
        None => scores,
    };
    let weights = ctx.tape.softmax_lastdim(scores);

    let attended = ctx.dropout(weights);
    let mixed = ctx.tape.matmul(attended, v)?;
    let merged = ctx.tape.permute(mixed, &[0, 2, 1, 3])?;
    let merged = ctx.tape.reshape(merged, &[b, tq, d])?;
    let out = linear(ctx, merged, &p.o)?;
    Ok(MhaOutput { out, weights })
}

fn combined_mask(
    b: usize,
    tq: usize,
    tk: usize,
    causal: bool,
    pad_mask: Option<&[f64]>,
) -> Option<Vec<f64>> {
    match (causal, pad_mask) {
        (false, None) => None,
        (false, Some(p)) => Some(p.to_vec()),
        (true, None) => {
            debug_assert_eq!(tq, tk);
            Some(causal_mask(b, tq))
        }
        (true, Some(p)) => {
            debug_assert_eq!(tq, tk);
            let mut m = causal_mask(b, tq);
            for (mi, pi) in m.iter_mut().zip(p) {
                *mi += pi;
            }
            Some(m)
        }
    }
}

/// Snapshot a weights node as a tensor for the attention record.
pub(crate) fn snapshot(ctx: &FwdCtx, weights: NodeId) -> Tensor {
    Tensor::new(ctx.tape.shape(weights).to_vec(), ctx.tape.value(weights).to_vec())
        .expect("weights node is well-formed")
}
