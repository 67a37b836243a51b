//! The detection network: backbone, path augmentation, encoder, cross-scale
//! fusion neck, and a query decoder with one head per layer.
//!
//! Data flow for an `(N, 3, H, W)` image:
//!
//! 1. backbone: `s3, s4, s5` at strides 8/16/32
//! 2. [`crate::fgpa`]: encoder input at stride 32 (just `lat5(s5)` when disabled)
//! 3. encoder: one attention block over the stride-32 tokens
//! 4. neck: `lat3(s3)`, `up(lat4(s4))` and `up(up(encoded))` meet at stride 8
//!    and are fused by [`crate::aff::adaptive_fuse_levels`], then projected
//!    back to `D` channels and flattened into decoder memory
//! 5. decoder: `L` layers, each emitting logits and boxes

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod params;

use crate::aff::{self, AffParams, AttentionMap};
use crate::error::{Error, Result};
use crate::fgpa::{AugmentedPyramid, Fgpa};
use crate::graph::Var;
use crate::tensor::Tensor;

pub use backbone::{Backbone, FeaturePyramid};
pub use config::{AffMode, ModelConfig};
pub use decoder::{Decoder, LayerOutput};
pub use encoder::Encoder;
pub use layers::{positional_encoding_2d, Conv};
pub use params::{Ctx, Init, ParamId, ParamStore};

/// Number of pyramid levels meeting in the fusion neck.
pub const NECK_LEVELS: usize = 3;

/// One decoder layer's predictions as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    /// `(N, Q, K)`.
    pub logits: Tensor,
    /// `(N, Q, 4)` normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
}

/// Predictions of every evaluated decoder layer, first layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub layers: Vec<LayerPrediction>,
}

/// Every intermediate of a forward pass, as tape variables.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub augmented: AugmentedPyramid,
    /// Encoder output `(N, h5*w5, D)`.
    pub memory: Var,
    /// Fused stride-8 memory fed to the decoder, `(N, h3*w3, D)`.
    pub decoder_memory: Var,
    pub attention_maps: Vec<AttentionMap>,
    pub layers: Vec<LayerOutput>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub fgpa: Fgpa,
    pub aff: Vec<AffParams>,
    pub neck: Conv,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh model with weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.hidden_dim;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, c.init_seed);
        let backbone = Backbone::new(&mut init, c.stem_channels, c.stage_channels)?;
        let sc = c.stage_channels;
        let fgpa = Fgpa::new(&mut init, [sc[1], sc[2], sc[3]], d, c.fgpa_enabled)?;
        let encoder = Encoder::new(&mut init, d, c.heads, c.ffn_dim)?;
        let aff = match c.aff_mode {
            AffMode::ElementwiseGate => (0..NECK_LEVELS)
                .map(|i| AffParams::new(&mut init, &format!("aff.level{i}"), d, c.aff_kernel))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let neck = Conv::new(&mut init, "neck.proj", NECK_LEVELS * d, d, 1, 1, 0)?;
        let decoder = Decoder::new(&mut init, d, c.heads, c.ffn_dim, c.decoder_layers, c.queries, c.classes)?;
        Ok(Self {
            config,
            params,
            backbone,
            fgpa,
            aff,
            neck,
            encoder,
            decoder,
        })
    }

    /// Model for `config` with its weights replaced by `params`.
    ///
    /// `params` must hold exactly the names and shapes the config implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let src = params
                .by_name(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            let t = params.get(src);
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    pub fn num_layers(&self) -> usize {
        self.decoder.layers.len()
    }

    /// Full forward pass through the first `depth` decoder layers.
    pub fn forward(&self, ctx: &mut Ctx, image: Var, depth: usize) -> Result<ForwardOutput> {
        let pyramid = self.backbone.forward(ctx, image)?;
        let augmented = self.fgpa.forward(ctx, &pyramid)?;
        let memory = self.encoder.forward(ctx, augmented.encoder_input)?;
        let (decoder_memory, memory_pos, attention_maps) = self.neck_forward(ctx, &augmented, memory)?;
        let layers = self.decoder.forward(ctx, decoder_memory, memory_pos, depth)?;
        Ok(ForwardOutput {
            pyramid,
            augmented,
            memory,
            decoder_memory,
            attention_maps,
            layers,
        })
    }

    /// Cross-scale fusion at stride 8.
    fn neck_forward(
        &self,
        ctx: &mut Ctx,
        aug: &AugmentedPyramid,
        memory: Var,
    ) -> Result<(Var, Var, Vec<AttentionMap>)> {
        let (n, _, h5, w5) = ctx.g.value(aug.encoder_input).dims4("neck")?;
        let encoded = layers::unflatten_tokens(ctx, memory, h5, w5)?;
        let up = ctx.g.upsample_nearest_2x(encoded)?;
        let encoded_up = ctx.g.upsample_nearest_2x(up)?;
        let lat4_up = ctx.g.upsample_nearest_2x(aug.laterals[1])?;
        let levels = [aug.laterals[0], lat4_up, encoded_up];
        let (fused, maps) = aff::adaptive_fuse_levels(ctx, &levels, &self.aff, self.config.aff_mode)?;
        let proj = self.neck.forward(ctx, fused)?;
        let proj = ctx.g.silu(proj);
        let (_, d, h3, w3) = ctx.g.value(proj).dims4("neck")?;
        let tokens = layers::flatten_tokens(ctx, proj)?;
        let pos = ctx.g.constant(positional_encoding_2d(h3, w3, d)?);
        let pos = ctx.g.expand_batch(pos, n);
        Ok((tokens, pos, maps))
    }

    /// Predictions of every decoder layer for `image (N, 3, H, W)`.
    pub fn predict(&self, image: &Tensor) -> Result<Predictions> {
        self.predict_depth(image, self.num_layers())
    }

    fn predict_depth(&self, image: &Tensor, depth: usize) -> Result<Predictions> {
        let mut ctx = Ctx::new(&self.params, false);
        let x = ctx.g.constant(image.clone());
        let out = self.forward(&mut ctx, x, depth)?;
        Ok(Predictions {
            layers: out
                .layers
                .iter()
                .map(|l| LayerPrediction {
                    logits: ctx.g.value(l.logits).clone(),
                    boxes: ctx.g.value(l.boxes).clone(),
                })
                .collect(),
        })
    }

    /// Runs only the first `depth` decoder layers and returns the last one's
    /// predictions; inference cost shrinks with `depth`, weights are shared.
    pub fn infer_with_depth(&self, image: &Tensor, depth: usize) -> Result<LayerPrediction> {
        if depth == 0 || depth > self.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "inference depth {depth} outside 1..={}",
                self.num_layers()
            )));
        }
        let mut p = self.predict_depth(image, depth)?;
        Ok(p.layers.pop().expect("depth >= 1"))
    }
}
