//! Fine-grained path augmentation.
//!
//! A top-down pyramid over the backbone levels is followed by bottom-up
//! paths that carry stride-8 detail back up to stride 32, so the encoder
//! input mixes shallow detail with deep semantics:
//!
//! ```text
//! p5 = lat5(s5)            n3 = p3
//! p4 = lat4(s4) + up(p5)   n4 = p4 + down3(n3)
//! p3 = lat3(s3) + up(p4)   n5 = p5 + down4(n4)
//!                          encoder_input = fuse(n5)
//! ```
//!
//! With the block disabled the encoder input is `lat5(s5)` alone.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::backbone::{FeaturePyramid, DOWNSAMPLE_KERNEL};
use crate::model::layers::Conv;
use crate::model::params::{Ctx, Init};

/// Stride-2 convs and the output fusion conv of the bottom-up half.
#[derive(Debug, Clone)]
pub struct BottomUp {
    pub down: [Conv; 2],
    pub fuse: Conv,
}

#[derive(Debug, Clone)]
pub struct Fgpa {
    /// 1x1 projections of s3, s4, s5 to the hidden width.
    pub lateral: [Conv; 3],
    /// Present when the augmentation is enabled.
    pub bottom_up: Option<BottomUp>,
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentedPyramid {
    /// `lat3(s3)`, `lat4(s4)`, `lat5(s5)`.
    pub laterals: [Var; 3],
    /// `p3, p4, p5`, when enabled.
    pub top_down: Option<[Var; 3]>,
    /// `n3, n4, n5`, when enabled.
    pub bottom_up: Option<[Var; 3]>,
    /// `(N, D, H/32, W/32)`.
    pub encoder_input: Var,
}

impl Fgpa {
    pub fn new(init: &mut Init, in_channels: [usize; 3], dim: usize, enabled: bool) -> Result<Self> {
        let lateral = [
            Conv::new(init, "fgpa.lateral3", in_channels[0], dim, 1, 1, 0)?,
            Conv::new(init, "fgpa.lateral4", in_channels[1], dim, 1, 1, 0)?,
            Conv::new(init, "fgpa.lateral5", in_channels[2], dim, 1, 1, 0)?,
        ];
        let bottom_up = if enabled {
            let k = DOWNSAMPLE_KERNEL;
            Some(BottomUp {
                down: [
                    Conv::new(init, "fgpa.down3", dim, dim, k, 2, 1)?,
                    Conv::new(init, "fgpa.down4", dim, dim, k, 2, 1)?,
                ],
                fuse: Conv::new(init, "fgpa.fuse", dim, dim, 3, 1, 1)?,
            })
        } else {
            None
        };
        Ok(Self { lateral, bottom_up })
    }

    pub fn enabled(&self) -> bool {
        self.bottom_up.is_some()
    }

    pub fn laterals(&self, ctx: &mut Ctx, fp: &FeaturePyramid) -> Result<[Var; 3]> {
        Ok([
            self.lateral[0].forward(ctx, fp.s3)?,
            self.lateral[1].forward(ctx, fp.s4)?,
            self.lateral[2].forward(ctx, fp.s5)?,
        ])
    }

    /// `p5 = lat5`, `p4 = lat4 + up(p5)`, `p3 = lat3 + up(p4)`.
    pub fn top_down(&self, ctx: &mut Ctx, laterals: [Var; 3]) -> Result<[Var; 3]> {
        let [l3, l4, l5] = laterals;
        let p5 = l5;
        let up5 = ctx.g.upsample_nearest_2x(p5)?;
        let p4 = ctx.g.add(l4, up5).map_err(|e| level_error("top_down", "p4", e))?;
        let up4 = ctx.g.upsample_nearest_2x(p4)?;
        let p3 = ctx.g.add(l3, up4).map_err(|e| level_error("top_down", "p3", e))?;
        Ok([p3, p4, p5])
    }

    /// `n3 = p3`, `n4 = p4 + down3(n3)`, `n5 = p5 + down4(n4)`.
    pub fn bottom_up(&self, ctx: &mut Ctx, p: [Var; 3]) -> Result<[Var; 3]> {
        let bu = self
            .bottom_up
            .as_ref()
            .ok_or_else(|| Error::Config("bottom-up paths are disabled".into()))?;
        let [p3, p4, p5] = p;
        for (name, v) in [("p3", p3), ("p4", p4)] {
            let (_, _, h, w) = ctx.g.value(v).dims4("bottom_up")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    "bottom_up",
                    format!("{name} extents {h}x{w} cannot be halved"),
                ));
            }
        }
        let n3 = p3;
        let d3 = bu.down[0].forward(ctx, n3)?;
        let n4 = ctx.g.add(p4, d3).map_err(|e| level_error("bottom_up", "n4", e))?;
        let d4 = bu.down[1].forward(ctx, n4)?;
        let n5 = ctx.g.add(p5, d4).map_err(|e| level_error("bottom_up", "n5", e))?;
        Ok([n3, n4, n5])
    }

    pub fn forward(&self, ctx: &mut Ctx, fp: &FeaturePyramid) -> Result<AugmentedPyramid> {
        let laterals = self.laterals(ctx, fp)?;
        let Some(bu) = &self.bottom_up else {
            return Ok(AugmentedPyramid {
                laterals,
                top_down: None,
                bottom_up: None,
                encoder_input: laterals[2],
            });
        };
        let p = self.top_down(ctx, laterals)?;
        let n = self.bottom_up(ctx, p)?;
        let encoder_input = bu.fuse.forward(ctx, n[2])?;
        Ok(AugmentedPyramid {
            laterals,
            top_down: Some(p),
            bottom_up: Some(n),
            encoder_input,
        })
    }
}

fn level_error(op: &'static str, level: &str, e: Error) -> Error {
    Error::shape(op, format!("building {level}: {e}"))
}
