use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::layers::Conv;
use crate::model::params::{Ctx, Init};

/// Kernel of every stride-2 conv. An even kernel with padding 1 divides even
/// extents exactly: `(H + 2 - 4) / 2 + 1 = H / 2`.
pub const DOWNSAMPLE_KERNEL: usize = 4;

/// Backbone outputs at strides 8, 16 and 32.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub s3: Var,
    pub s4: Var,
    pub s5: Var,
}

/// Stem plus four stride-2 stages, SiLU after each conv.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv,
    pub stages: [Conv; 4],
}

impl Backbone {
    pub fn new(init: &mut Init, stem_channels: usize, stage_channels: [usize; 4]) -> Result<Self> {
        let k = DOWNSAMPLE_KERNEL;
        let stem = Conv::new(init, "backbone.stem", 3, stem_channels, k, 2, 1)?;
        let mut prev = stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in stage_channels.iter().enumerate() {
            stages.push(Conv::new(init, &format!("backbone.stage{}", i + 1), prev, c, k, 2, 1)?);
            prev = c;
        }
        Ok(Self {
            stem,
            stages: stages.try_into().expect("four stages"),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = ctx.g.value(image).dims4("backbone")?;
        if c != 3 {
            return Err(Error::shape("backbone", format!("expected 3 image channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "backbone",
                format!("image extents {h}x{w} must be positive multiples of 32"),
            ));
        }
        let x = self.stem.forward(ctx, image)?;
        let mut x = ctx.g.silu(x);
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            let y = stage.forward(ctx, x)?;
            x = ctx.g.silu(y);
            outs.push(x);
        }
        Ok(FeaturePyramid {
            s3: outs[1],
            s4: outs[2],
            s5: outs[3],
        })
    }
}
