//! Adaptive feature fusion.
//!
//! A learned conv with a single output channel followed by a sigmoid gives a
//! spatial attention map `A = sigmoid(W_a * X)` with one weight in (0, 1) per
//! position of the `C x H x W` input. The map is read as `H x W` (one weight
//! per spatial position).
//!
//! The map is applied in one of two ways:
//! - [`fuse_pooled`]: `Y[c] = sum_{i,j} A[i,j] * X[c,i,j]`, collapsing the grid
//!   to one vector per channel.
//! - [`gate_elementwise`]: `X[c,i,j] * A[i,j]`, keeping the grid. This is what
//!   the detector uses when fusing pyramid levels.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::config::AffMode;
use crate::model::layers::Conv;
use crate::model::params::{Ctx, Init};

/// Attention-map conv: weight `(1, C, k, k)`, "same" padding.
#[derive(Debug, Clone)]
pub struct AffParams {
    pub conv: Conv,
    pub channels: usize,
    pub kernel: usize,
}

impl AffParams {
    pub fn new(init: &mut Init, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention kernel {kernel} must be odd for \"same\" padding"
            )));
        }
        Ok(Self {
            conv: Conv::new(init, name, channels, 1, kernel, 1, kernel / 2)?,
            channels,
            kernel,
        })
    }
}

/// `(N, 1, H, W)` map with every entry in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMap(pub Var);

/// `(N, C)` pooled feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedVector(pub Var);

/// `A = sigmoid(conv(x, W_a))`.
pub fn attention_map(ctx: &mut Ctx, x: Var, p: &AffParams) -> Result<AttentionMap> {
    let (_, c, _, _) = ctx.g.value(x).dims4("attention_map")?;
    if c != p.channels {
        return Err(Error::shape(
            "attention_map",
            format!("input channels: attention conv expects {}, input has {c}", p.channels),
        ));
    }
    let logits = p.conv.forward(ctx, x)?;
    Ok(AttentionMap(ctx.g.sigmoid(logits)))
}

/// `Y[n,c] = sum_{i,j} A[n,0,i,j] * X[n,c,i,j]`.
pub fn fuse_pooled(g: &mut Graph, x: Var, a: AttentionMap) -> Result<FusedVector> {
    Ok(FusedVector(g.weighted_spatial_sum(x, a.0)?))
}

/// `out[n,c,i,j] = A[n,0,i,j] * X[n,c,i,j]`.
pub fn gate_elementwise(g: &mut Graph, x: Var, a: AttentionMap) -> Result<Var> {
    g.mul_broadcast(a.0, x)
}

/// Fuses same-resolution levels into one `(N, C * levels, h, w)` map.
///
/// `Off` is plain concatenation. `ElementwiseGate` gates each level by its
/// own attention map first. Returns the attention maps used, if any.
pub fn adaptive_fuse_levels(
    ctx: &mut Ctx,
    levels: &[Var],
    params: &[AffParams],
    mode: AffMode,
) -> Result<(Var, Vec<AttentionMap>)> {
    let first = *levels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no levels to fuse".into()))?;
    let reference = ctx.g.shape(first).to_vec();
    for (i, &l) in levels.iter().enumerate() {
        if ctx.g.shape(l) != reference.as_slice() {
            return Err(Error::shape(
                "adaptive_fuse_levels",
                format!("level {i} has shape {:?}, level 0 has {:?}", ctx.g.shape(l), reference),
            ));
        }
    }
    match mode {
        AffMode::Off => Ok((ctx.g.concat_channels(levels)?, Vec::new())),
        AffMode::ElementwiseGate => {
            if params.len() != levels.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} levels but {} attention parameter sets",
                    levels.len(),
                    params.len()
                )));
            }
            let mut gated = Vec::with_capacity(levels.len());
            let mut maps = Vec::with_capacity(levels.len());
            for (&l, p) in levels.iter().zip(params) {
                let a = attention_map(ctx, l, p)?;
                gated.push(gate_elementwise(&mut ctx.g, l, a)?);
                maps.push(a);
            }
            Ok((ctx.g.concat_channels(&gated)?, maps))
        }
        AffMode::LiteralPool => Err(Error::Config(
            "literal_pool yields per-channel vectors and cannot fuse spatial levels".into(),
        )),
    }
}
