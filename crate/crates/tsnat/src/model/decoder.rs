//! Dual-mode transformer decoder. One parameter set, two self-attention
//! regimes: strictly causal for AR, unmasked for NAR. Cross-attention reads
//! the encoded frames in both modes.

use crate::data::Vocab;
use crate::tape::NodeId;

use super::attention::{linear, multi_head_attention, snapshot};
use super::encoder::{ffn_apply, LN_EPS};
use super::{
    key_pad_mask, positional_encoding, AttentionRecord, DecodeMode, FwdCtx, Model, ModelError,
};

impl Model {
    /// Decode a padded token batch against encoded frames.
    ///
    /// `tokens` is row-major [batch, len]; `token_lens` gives each row's live
    /// length (None means every position is live). `encoded` is [batch,T',d]
    /// with `enc_lens` marking real frames per row (None: all real). Returns
    /// logits [batch, len, vocab] and, when `ctx.record_attn` is set, the
    /// attention weights of every layer.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_forward_batch(
        &self,
        ctx: &mut FwdCtx,
        tokens: &[u32],
        batch: usize,
        len: usize,
        token_lens: Option<&[usize]>,
        encoded: NodeId,
        enc_lens: Option<&[usize]>,
        mode: DecodeMode,
    ) -> Result<(NodeId, AttentionRecord), ModelError> {
        debug_assert_eq!(tokens.len(), batch * len);
        self.validate_decoder_input(tokens, batch, len, token_lens, mode)?;
        let d = self.cfg.d_model;
        let t_enc = self.cfg_enc_len(ctx, encoded);

        let table = ctx.p(self.handles.tok_embed);
        // filler embeds as <MASK>: a PAD-padded NAR row then computes exactly
        // like the fixed-length all-MASK sequence inference feeds the decoder
        let embed_ids: Vec<u32> = tokens
            .iter()
            .map(|&t| if t == Vocab::PAD { Vocab::MASK } else { t })
            .collect();
        let emb = ctx.tape.embedding(table, &embed_ids)?;
        let emb = ctx.tape.reshape(emb, &[batch, len, d])?;
        let emb = ctx.tape.scale(emb, (d as f64).sqrt());
        let pe = positional_encoding(len, d);
        let emb = ctx.tape.add_const(emb, &pe);
        let mut h = ctx.dropout(emb);

        // AR: the causal mask already hides each row's trailing pads from
        // its live positions. NAR: no self-attention mask at all; padded rows
        // embed their filler as <MASK>, so attention runs over the same dense
        // fixed-length context as inference.
        let self_pad: Option<Vec<f64>> = None;
        let cross_pad = enc_lens.and_then(|lens| key_pad_mask(len, t_enc, lens));
        let causal = mode == DecodeMode::Ar;

        let mut record = AttentionRecord::default();
        for layer in &self.handles.dec {
            let self_attn = multi_head_attention(
                ctx,
                &layer.self_attn,
                h,
                h,
                h,
                self.cfg.n_heads,
                causal,
                self_pad.as_deref(),
            )?;
            if ctx.record_attn {
                record.self_attn.push(snapshot(ctx, self_attn.weights));
            }
            let a = ctx.dropout(self_attn.out);
            let r = ctx.tape.add(h, a)?;
            let (g, be) = (ctx.p(layer.norm1.gamma), ctx.p(layer.norm1.beta));
            h = ctx.tape.layer_norm(r, g, be, LN_EPS)?;

            let cross = multi_head_attention(
                ctx,
                &layer.cross_attn,
                h,
                encoded,
                encoded,
                self.cfg.n_heads,
                false,
                cross_pad.as_deref(),
            )?;
            if ctx.record_attn {
                record.cross_attn.push(snapshot(ctx, cross.weights));
            }
            let c = ctx.dropout(cross.out);
            let r = ctx.tape.add(h, c)?;
            let (g, be) = (ctx.p(layer.norm2.gamma), ctx.p(layer.norm2.beta));
            h = ctx.tape.layer_norm(r, g, be, LN_EPS)?;

            let f = ffn_apply(ctx, &layer.ffn, h)?;
            let f = ctx.dropout(f);
            let r = ctx.tape.add(h, f)?;
            let (g, be) = (ctx.p(layer.norm3.gamma), ctx.p(layer.norm3.beta));
            h = ctx.tape.layer_norm(r, g, be, LN_EPS)?;
        }
        let logits = linear(ctx, h, &self.handles.out)?;
        Ok((logits, record))
    }

    /// Single-sequence decode: `token_ids` against encoded [1,T',d].
    /// AR input must begin with `<BOS>`; NAR input must be all `<MASK>`.
    pub fn decoder_forward(
        &self,
        ctx: &mut FwdCtx,
        token_ids: &[u32],
        encoded: NodeId,
        mode: DecodeMode,
    ) -> Result<(NodeId, AttentionRecord), ModelError> {
        let (logits, record) =
            self.decoder_forward_batch(ctx, token_ids, 1, token_ids.len(), None, encoded, None, mode)?;
        let v = self.cfg.vocab_size;
        let flat = ctx.tape.reshape(logits, &[token_ids.len(), v])?;
        Ok((flat, record))
    }

    fn validate_decoder_input(
        &self,
        tokens: &[u32],
        batch: usize,
        len: usize,
        token_lens: Option<&[usize]>,
        mode: DecodeMode,
    ) -> Result<(), ModelError> {
        for b in 0..batch {
            let row = &tokens[b * len..(b + 1) * len];
            let live = token_lens.map(|l| l[b]).unwrap_or(len);
            match mode {
                DecodeMode::Ar => {
                    if row.first() != Some(&Vocab::BOS) {
                        return Err(ModelError::ArInputMissingBos);
                    }
                }
                DecodeMode::Nar => {
                    if row[..live].iter().any(|&t| t != Vocab::MASK) {
                        return Err(ModelError::NarInputNotMask);
                    }
                }
            }
        }
        Ok(())
    }

    fn cfg_enc_len(&self, ctx: &FwdCtx, encoded: NodeId) -> usize {
        let s = ctx.tape.shape(encoded);
        s[s.len() - 2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FrontendKind, Model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            n_enc_layers: 1,
            n_dec_layers: 2,
            d_model: 16,
            d_ff: 12,
            n_heads: 4,
            vocab_size: 9,
            max_decode_len: 8,
            frontend: FrontendKind::Conv,
            feature_dim: 4,
            dropout: 0.0,
        };
        Model::new(cfg, seed).unwrap()
    }

    fn encode(model: &Model, ctx: &mut FwdCtx, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<f64> = (0..10 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (enc, _) = model.encode_utterance(ctx, &frames, 10).unwrap();
        enc
    }

    fn ar_input(tokens: &[u32]) -> Vec<u32> {
        let mut v = vec![Vocab::BOS];
        v.extend_from_slice(tokens);
        v
    }

    #[test]
    fn ar_requires_bos() {
        let model = toy_model(1);
        let mut ctx = FwdCtx::eval(&model.params);
        let enc = encode(&model, &mut ctx, 1);
        let err = model
            .decoder_forward(&mut ctx, &[5, 6], enc, DecodeMode::Ar)
            .unwrap_err();
        assert!(matches!(err, ModelError::ArInputMissingBos));
    }

    #[test]
    fn nar_requires_mask_tokens() {
        let model = toy_model(1);
        let mut ctx = FwdCtx::eval(&model.params);
        let enc = encode(&model, &mut ctx, 1);
        let err = model
            .decoder_forward(&mut ctx, &[Vocab::MASK, 5], enc, DecodeMode::Nar)
            .unwrap_err();
        assert!(matches!(err, ModelError::NarInputNotMask));
    }

    #[test]
    fn ar_causality_is_bit_exact() {
        let model = toy_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let len = rng.gen_range(2..=6);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(5..9)).collect();
            let k = rng.gen_range(1..=len); // perturb position k of the input
            let input = ar_input(&tokens);
            let mut perturbed = input.clone();
            perturbed[k] = 5 + ((perturbed[k] - 5 + 1) % 4);

            let run = |toks: &[u32]| {
                let mut ctx = FwdCtx::eval(&model.params);
                let enc = encode(&model, &mut ctx, 3);
                let (logits, _) = model.decoder_forward(&mut ctx, toks, enc, DecodeMode::Ar).unwrap();
                ctx.tape.value(logits).to_vec()
            };
            let base = run(&input);
            let changed = run(&perturbed);
            let v = model.cfg.vocab_size;
            assert_eq!(&base[..k * v], &changed[..k * v], "trial {trial}: prefix logits moved");
            assert_ne!(base, changed, "perturbation must reach later logits");
        }
    }

    #[test]
    fn nar_logits_depend_on_sequence_length() {
        let model = toy_model(3);
        let run = |l: usize| {
            let mut ctx = FwdCtx::eval(&model.params);
            let enc = encode(&model, &mut ctx, 5);
            let toks = vec![Vocab::MASK; l];
            let (logits, _) = model.decoder_forward(&mut ctx, &toks, enc, DecodeMode::Nar).unwrap();
            ctx.tape.value(logits).to_vec()
        };
        let v = model.cfg.vocab_size;
        let a = run(6);
        let b = run(8);
        assert_ne!(&a[..6 * v], &b[..6 * v], "dense self-attention must mix lengths");
    }

    #[test]
    fn attention_rows_sum_to_one_in_both_modes() {
        let model = toy_model(4);
        for mode in [DecodeMode::Ar, DecodeMode::Nar] {
            let mut ctx = FwdCtx::eval(&model.params);
            ctx.record_attn = true;
            let enc = encode(&model, &mut ctx, 7);
            let toks = match mode {
                DecodeMode::Ar => ar_input(&[5, 6, 7]),
                DecodeMode::Nar => vec![Vocab::MASK; 4],
            };
            let (_, record) = model.decoder_forward(&mut ctx, &toks, enc, mode).unwrap();
            assert_eq!(record.self_attn.len(), 2);
            assert_eq!(record.cross_attn.len(), 2);
            for t in record.self_attn.iter().chain(&record.cross_attn) {
                let tk = *t.shape().last().unwrap();
                for row in t.data().chunks(tk) {
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
                }
            }
        }
    }

    #[test]
    fn recorded_ar_self_attention_is_lower_triangular() {
        let model = toy_model(5);
        let mut ctx = FwdCtx::eval(&model.params);
        ctx.record_attn = true;
        let enc = encode(&model, &mut ctx, 9);
        let toks = ar_input(&[5, 6, 7, 8]);
        let (_, record) = model.decoder_forward(&mut ctx, &toks, enc, DecodeMode::Ar).unwrap();
        for t in &record.self_attn {
            let s = t.shape();
            let (h, tq, tk) = (s[1], s[2], s[3]);
            for hi in 0..h {
                for i in 0..tq {
                    for j in i + 1..tk {
                        assert_eq!(t.data()[(hi * tq + i) * tk + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn both_modes_touch_identical_parameters() {
        let model = toy_model(6);
        let touched = |mode: DecodeMode| {
            let mut ctx = FwdCtx::eval(&model.params);
            let enc_data = {
                let mut inner = FwdCtx::eval(&model.params);
                let enc = encode(&model, &mut inner, 13);
                inner.tape.value(enc).to_vec()
            };
            let enc = ctx.tape.leaf(&[1, 3, 16], &enc_data, false);
            let toks = match mode {
                DecodeMode::Ar => ar_input(&[5, 6]),
                DecodeMode::Nar => vec![Vocab::MASK; 3],
            };
            model.decoder_forward(&mut ctx, &toks, enc, mode).unwrap();
            ctx.touched()
        };
        let ar = touched(DecodeMode::Ar);
        let nar = touched(DecodeMode::Nar);
        assert_eq!(ar, nar);
        assert!(!ar.is_empty());
    }
}
