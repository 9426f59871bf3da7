//! Acoustic front end: downsample raw frames 4× along time and project to
//! d_model, either with two stride-2 convolutions or by frame splicing.

use crate::tape::NodeId;

use super::attention::linear;
use super::{FrontendKind, FrontendP, FwdCtx, Model, ModelError};

/// Fewest input frames either front end accepts.
pub const MIN_FRAMES: usize = 4;

/// Output length for a given input length.
pub fn frontend_out_len(kind: FrontendKind, t: usize) -> usize {
    match kind {
        // two stride-2 convs with kernel 3, pad 1: ceil(ceil(t/2)/2)
        FrontendKind::Conv => t.div_ceil(2).div_ceil(2),
        FrontendKind::LinearSplice => t / 4,
    }
}

pub(crate) fn frontend_forward_batch(
    ctx: &mut FwdCtx,
    p: &FrontendP,
    feats: NodeId,
) -> Result<NodeId, ModelError> {
    match p {
        FrontendP::Conv { conv1, conv2, proj } => {
            let u1 = ctx.tape.unfold_time(feats, 3, 2, 1)?;
            let c1 = linear(ctx, u1, conv1)?;
            let h1 = ctx.tape.relu(c1);
            let u2 = ctx.tape.unfold_time(h1, 3, 2, 1)?;
            let c2 = linear(ctx, u2, conv2)?;
            let h2 = ctx.tape.relu(c2);
            Ok(linear(ctx, h2, proj)?)
        }
        FrontendP::Splice { proj } => {
            let u = ctx.tape.unfold_time(feats, 4, 4, 0)?;
            Ok(linear(ctx, u, proj)?)
        }
    }
}

impl Model {
    /// Front end over one utterance: frames [T, F] row-major → [T', d_model].
    pub fn frontend_forward(
        &self,
        ctx: &mut FwdCtx,
        frames: &[f64],
        n_frames: usize,
    ) -> Result<NodeId, ModelError> {
        if n_frames < MIN_FRAMES {
            return Err(ModelError::UtteranceTooShort {
                t: n_frames,
                min: MIN_FRAMES,
                kind: match self.cfg.frontend {
                    FrontendKind::Conv => "conv",
                    FrontendKind::LinearSplice => "linear-splice",
                },
            });
        }
        let f = self.cfg.feature_dim;
        debug_assert_eq!(frames.len(), n_frames * f);
        let x = ctx.tape.leaf(&[1, n_frames, f], frames, false);
        let out = frontend_forward_batch(ctx, &self.handles.frontend, x)?;
        let t_out = frontend_out_len(self.cfg.frontend, n_frames);
        Ok(ctx.tape.reshape(out, &[t_out, self.cfg.d_model])?)
    }
}
