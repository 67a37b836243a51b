use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::layers::{flatten_tokens, positional_encoding_2d, FeedForward, LayerNorm, MultiHeadAttention};
use crate::model::params::{Ctx, Init};

/// Single-scale encoder block over the stride-32 feature.
///
/// Positions are added to queries and keys only; values use the raw tokens.
/// Post-norm residuals: `x = LN(x + attn(x))`, `x = LN(x + ffn(x))`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub dim: usize,
}

impl Encoder {
    pub fn new(init: &mut Init, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(init, "encoder.attn", dim, heads)?,
            norm1: LayerNorm::new(init, "encoder.norm1", dim)?,
            ffn: FeedForward::new(init, "encoder.ffn", dim, ffn_dim, dim)?,
            norm2: LayerNorm::new(init, "encoder.norm2", dim)?,
            dim,
        })
    }

    /// `(N, D, h, w)` to memory `(N, h*w, D)`.
    pub fn forward(&self, ctx: &mut Ctx, top: Var) -> Result<Var> {
        let (n, c, h, w) = ctx.g.value(top).dims4("encoder")?;
        if c != self.dim {
            return Err(Error::shape(
                "encoder",
                format!("channel dimension {c} does not match hidden dim {}", self.dim),
            ));
        }
        let src = flatten_tokens(ctx, top)?;
        let pos = ctx.g.constant(positional_encoding_2d(h, w, c)?);
        let pos = ctx.g.expand_batch(pos, n);
        let qk = ctx.g.add(src, pos)?;
        let attn = self.attn.forward(ctx, qk, qk, src)?;
        let x = ctx.g.add(src, attn)?;
        let x = self.norm1.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, x)?;
        let x = ctx.g.add(x, f)?;
        self.norm2.forward(ctx, x)
    }
}
