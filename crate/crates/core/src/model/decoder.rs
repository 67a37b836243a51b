use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::model::params::{Ctx, Init, ParamId};

/// One decoder layer with its own prediction heads.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
    pub class_head: Linear,
    pub box_head: FeedForward,
}

/// Tape variables of one layer's predictions.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `(N, Q, K)` class logits.
    pub logits: Var,
    /// `(N, Q, 4)` normalized `(cx, cy, w, h)` in (0, 1).
    pub boxes: Var,
}

/// Learned queries refined by `L` layers of self-attention, cross-attention
/// to memory, and a feed-forward block.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub query_content: ParamId,
    pub query_pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub queries: usize,
    pub dim: usize,
}

impl Decoder {
    pub fn new(
        init: &mut Init,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        layers: usize,
        queries: usize,
        classes: usize,
    ) -> Result<Self> {
        let query_content = init.uniform("decoder.query_content", &[queries, dim], 1.0)?;
        let query_pos = init.uniform("decoder.query_pos", &[queries, dim], 1.0)?;
        let layers = (0..layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(init, &format!("{p}.self_attn"), dim, heads)?,
                    norm1: LayerNorm::new(init, &format!("{p}.norm1"), dim)?,
                    cross_attn: MultiHeadAttention::new(init, &format!("{p}.cross_attn"), dim, heads)?,
                    norm2: LayerNorm::new(init, &format!("{p}.norm2"), dim)?,
                    ffn: FeedForward::new(init, &format!("{p}.ffn"), dim, ffn_dim, dim)?,
                    norm3: LayerNorm::new(init, &format!("{p}.norm3"), dim)?,
                    class_head: Linear::new(init, &format!("{p}.class_head"), dim, classes)?,
                    box_head: FeedForward::new(init, &format!("{p}.box_head"), dim, dim, 4)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            query_content,
            query_pos,
            layers,
            queries,
            dim,
        })
    }

    /// Runs the first `depth` layers over `memory (N, S, D)` whose positions
    /// are `memory_pos (N, S, D)`, returning every layer's predictions.
    pub fn forward(&self, ctx: &mut Ctx, memory: Var, memory_pos: Var, depth: usize) -> Result<Vec<LayerOutput>> {
        if depth == 0 || depth > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "decoder depth {depth} outside 1..={}",
                self.layers.len()
            )));
        }
        let &[n, _, d] = ctx.g.shape(memory) else {
            return Err(Error::shape("decoder", format!("memory must be (N,S,D), got {:?}", ctx.g.shape(memory))));
        };
        if d != self.dim || ctx.g.shape(memory_pos) != ctx.g.shape(memory) {
            return Err(Error::shape(
                "decoder",
                format!("memory {:?} / positions {:?} vs hidden dim {}", ctx.g.shape(memory), ctx.g.shape(memory_pos), self.dim),
            ));
        }
        let content = ctx.p(self.query_content);
        let mut tgt = ctx.g.expand_batch(content, n);
        let qpos = ctx.p(self.query_pos);
        let qpos = ctx.g.expand_batch(qpos, n);
        let mem_k = ctx.g.add(memory, memory_pos)?;

        let mut outputs = Vec::with_capacity(depth);
        for layer in &self.layers[..depth] {
            let q = ctx.g.add(tgt, qpos)?;
            let sa = layer.self_attn.forward(ctx, q, q, tgt)?;
            let x = ctx.g.add(tgt, sa)?;
            tgt = layer.norm1.forward(ctx, x)?;

            let q = ctx.g.add(tgt, qpos)?;
            let ca = layer.cross_attn.forward(ctx, q, mem_k, memory)?;
            let x = ctx.g.add(tgt, ca)?;
            tgt = layer.norm2.forward(ctx, x)?;

            let f = layer.ffn.forward(ctx, tgt)?;
            let x = ctx.g.add(tgt, f)?;
            tgt = layer.norm3.forward(ctx, x)?;

            let logits = layer.class_head.forward(ctx, tgt)?;
            let raw = layer.box_head.forward(ctx, tgt)?;
            let boxes = ctx.g.sigmoid(raw);
            outputs.push(LayerOutput { logits, boxes });
        }
        Ok(outputs)
    }
}
