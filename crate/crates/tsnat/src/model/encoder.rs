//! Acoustic encoder: positional encoding plus a stack of self-attention +
//! GLU feed-forward blocks with post-norm residuals.

use crate::tape::NodeId;

use super::attention::{linear, multi_head_attention};
use super::frontend::{frontend_forward_batch, frontend_out_len, MIN_FRAMES};
use super::{key_pad_mask, positional_encoding, FfnP, FrontendKind, FwdCtx, Model, ModelError};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn ffn_apply(ctx: &mut FwdCtx, p: &FfnP, x: NodeId) -> Result<NodeId, ModelError> {
    let expanded = linear(ctx, x, &p.expand)?;
    let gated = ctx.tape.glu(expanded)?;
    Ok(linear(ctx, gated, &p.contract)?)
}

impl Model {
    /// The encoder layer stack alone: [B,T',d] → [B,T',d]. With zero layers
    /// this is the identity. `pad_mask`, when given, is additive [B,T',T'].
    pub fn encoder_forward(
        &self,
        ctx: &mut FwdCtx,
        x: NodeId,
        pad_mask: Option<&[f64]>,
    ) -> Result<NodeId, ModelError> {
        let mut h = x;
        for layer in &self.handles.enc {
            let attn = multi_head_attention(
                ctx,
                &layer.self_attn,
                h,
                h,
                h,
                self.cfg.n_heads,
                false,
                pad_mask,
            )?;
            let a = ctx.dropout(attn.out);
            let r = ctx.tape.add(h, a)?;
            let g = ctx.p(layer.norm1.gamma);
            let be = ctx.p(layer.norm1.beta);
            h = ctx.tape.layer_norm(r, g, be, LN_EPS)?;

            let f = ffn_apply(ctx, &layer.ffn, h)?;
            let f = ctx.dropout(f);
            let r = ctx.tape.add(h, f)?;
            let g = ctx.p(layer.norm2.gamma);
            let be = ctx.p(layer.norm2.beta);
            h = ctx.tape.layer_norm(r, g, be, LN_EPS)?;
        }
        Ok(h)
    }

    /// Full acoustic encoding of a padded batch: front end, √d scaling,
    /// positional encoding, dropout, encoder stack. `frame_lens` gives each
    /// utterance's true frame count; returns the encoded node [B,T',d] and
    /// the per-utterance encoded lengths.
    pub fn encode_batch(
        &self,
        ctx: &mut FwdCtx,
        feats: &[f64],
        batch: usize,
        t_max: usize,
        frame_lens: &[usize],
    ) -> Result<(NodeId, Vec<usize>), ModelError> {
        debug_assert_eq!(feats.len(), batch * t_max * self.cfg.feature_dim);
        debug_assert_eq!(frame_lens.len(), batch);
        if let Some(&t) = frame_lens.iter().find(|&&t| t < MIN_FRAMES) {
            return Err(ModelError::UtteranceTooShort {
                t,
                min: MIN_FRAMES,
                kind: match self.cfg.frontend {
                    FrontendKind::Conv => "conv",
                    FrontendKind::LinearSplice => "linear-splice",
                },
            });
        }
        let x = ctx.tape.leaf(&[batch, t_max, self.cfg.feature_dim], feats, false);
        let fronted = frontend_forward_batch(ctx, &self.handles.frontend, x)?;
        let t_out = frontend_out_len(self.cfg.frontend, t_max);
        let enc_lens: Vec<usize> = frame_lens
            .iter()
            .map(|&l| frontend_out_len(self.cfg.frontend, l))
            .collect();

        // the projected features are already O(1); only token embeddings get
        // the √d_model rescale
        let pe = positional_encoding(t_out, self.cfg.d_model);
        let with_pe = ctx.tape.add_const(fronted, &pe);
        let h = ctx.dropout(with_pe);

        let pad = key_pad_mask(t_out, t_out, &enc_lens);
        let encoded = self.encoder_forward(ctx, h, pad.as_deref())?;
        self.note_encoder_pass();
        Ok((encoded, enc_lens))
    }

    /// Encode a single utterance; returns [1, T', d].
    pub fn encode_utterance(
        &self,
        ctx: &mut FwdCtx,
        frames: &[f64],
        n_frames: usize,
    ) -> Result<(NodeId, usize), ModelError> {
        let (enc, lens) = self.encode_batch(ctx, frames, 1, n_frames, &[n_frames])?;
        Ok((enc, lens[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FrontendKind, Model, ModelConfig};

    fn model(n_enc_layers: usize) -> Model {
        let cfg = ModelConfig {
            n_enc_layers,
            n_dec_layers: 1,
            d_model: 8,
            d_ff: 6,
            n_heads: 2,
            vocab_size: 8,
            max_decode_len: 6,
            frontend: FrontendKind::Conv,
            feature_dim: 3,
            dropout: 0.0,
        };
        Model::new(cfg, 7).unwrap()
    }

    #[test]
    fn zero_layers_is_identity() {
        let m = model(0);
        let mut ctx = FwdCtx::eval(&m.params);
        let data: Vec<f64> = (0..2 * 3 * 8).map(|i| (i as f64 * 0.11).cos()).collect();
        let x = ctx.tape.leaf(&[2, 3, 8], &data, false);
        let y = m.encoder_forward(&mut ctx, x, None).unwrap();
        assert_eq!(ctx.tape.value(y), data.as_slice());
    }

    #[test]
    fn output_shape_is_preserved() {
        let m = model(2);
        let mut ctx = FwdCtx::eval(&m.params);
        let frames = vec![0.3; 10 * 3];
        let (enc, lens) = m.encode_batch(&mut ctx, &frames, 1, 10, &[10]).unwrap();
        assert_eq!(ctx.tape.shape(enc), &[1, 3, 8]);
        assert_eq!(lens, vec![3]);
    }

    #[test]
    fn eval_mode_is_bit_deterministic() {
        let m = model(2);
        let frames: Vec<f64> = (0..12 * 3).map(|i| (i as f64 * 0.21).sin()).collect();
        let run = || {
            let mut ctx = FwdCtx::eval(&m.params);
            let (enc, _) = m.encode_batch(&mut ctx, &frames, 1, 12, &[12]).unwrap();
            ctx.tape.value(enc).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_pass_counter_increments() {
        let m = model(1);
        let before = m.encoder_pass_count();
        let mut ctx = FwdCtx::eval(&m.params);
        let frames = vec![0.0; 8 * 3];
        m.encode_batch(&mut ctx, &frames, 1, 8, &[8]).unwrap();
        assert_eq!(m.encoder_pass_count(), before + 1);
    }

    #[test]
    fn padded_batch_matches_single_utterance() {
        // encoding an utterance alone equals encoding it padded in a batch
        let m = model(2);
        let f = 3;
        let a: Vec<f64> = (0..9 * f).map(|i| (i as f64 * 0.31).sin()).collect();
        let b: Vec<f64> = (0..6 * f).map(|i| (i as f64 * 0.17).cos()).collect();

        let mut solo = FwdCtx::eval(&m.params);
        let (enc_a, _) = m.encode_batch(&mut solo, &a, 1, 9, &[9]).unwrap();
        let solo_vals = solo.tape.value(enc_a).to_vec();

        let mut padded = b.clone();
        padded.resize(9 * f, 0.0);
        let mut feats = a.clone();
        feats.extend_from_slice(&padded);
        let mut both = FwdCtx::eval(&m.params);
        let (enc, lens) = m.encode_batch(&mut both, &feats, 2, 9, &[9, 6]).unwrap();
        assert_eq!(lens, vec![3, 2]);
        let batch_vals = &both.tape.value(enc)[..3 * 8];
        assert_eq!(batch_vals, solo_vals.as_slice());
    }
}
