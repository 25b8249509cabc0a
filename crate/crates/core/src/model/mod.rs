//! The segmentation network: a convolutional downsampling encoder feeding a
//! stack of factorized space-time transformer blocks (frozen spatial attention
//! and feed-forward weights, trainable temporal attention and adapters), and a
//! prompt-conditioned decoder with attention-filtered skip connections.

mod block;
mod decoder;
mod encoder;
mod graph;
mod params;
mod prompt;

use serde::{Deserialize, Serialize};

pub use block::block_forward;
pub use decoder::decoder_forward;
pub use encoder::encoder_forward;
pub use graph::{Builder, Graph};
pub use params::{Group, Init, Param, ParamStore, Partition};
pub use prompt::PromptTable;

use crate::dataset::View;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Channels of each downsampling stage; each stage halves H and W.
    pub encoder_channels: Vec<usize>,
    pub adapter_bottleneck: usize,
    pub adapter_scale: f64,
    pub use_temporal_pos_embed: bool,
    /// Longest clip the temporal position table covers.
    pub max_phases: usize,
    pub num_prompt_tokens: usize,
    pub decoder_heads: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    /// Skip features are average-pooled to at most this many cells per side
    /// before serving as keys and values of the skip attention.
    pub mhca_kv_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            encoder_channels: vec![16, 32, 64],
            adapter_bottleneck: 16,
            adapter_scale: 0.5,
            use_temporal_pos_embed: true,
            max_phases: 32,
            num_prompt_tokens: 1,
            decoder_heads: 4,
            decoder_depth: 2,
            mlp_ratio: 4,
            mhca_kv_grid: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!("embed_dim {} must be divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return fail("encoder_channels must list at least one positive channel count".into());
        }
        if self.decoder_heads == 0 || !self.embed_dim.is_multiple_of(self.decoder_heads) {
            return fail(format!(
                "embed_dim {} must be divisible by decoder_heads {}",
                self.embed_dim, self.decoder_heads
            ));
        }
        if let Some(c) = self.encoder_channels.iter().find(|c| *c % self.decoder_heads != 0) {
            return fail(format!("encoder channel count {c} must be divisible by decoder_heads {}", self.decoder_heads));
        }
        if self.adapter_bottleneck == 0 {
            return fail("adapter_bottleneck must be positive".into());
        }
        if !(self.adapter_scale >= 0.0 && self.adapter_scale.is_finite()) {
            return fail(format!("adapter_scale {} must be finite and >= 0", self.adapter_scale));
        }
        if self.max_phases == 0 || self.mlp_ratio == 0 || self.mhca_kv_grid == 0 || self.decoder_depth == 0 {
            return fail("max_phases, mlp_ratio, mhca_kv_grid and decoder_depth must be positive".into());
        }
        if self.num_prompt_tokens == 0 || 2 * self.num_prompt_tokens > self.embed_dim {
            return fail(format!(
                "num_prompt_tokens {} must be in 1..={}",
                self.num_prompt_tokens,
                self.embed_dim / 2
            ));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Checks that an `height x width x phases` clip fits this architecture.
    pub fn check_geometry(&self, height: usize, width: usize, phases: usize) -> Result<()> {
        let f = 1usize << self.stages();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} is not divisible by 2^{} = {f}",
                self.stages()
            )));
        }
        if phases == 0 || (self.use_temporal_pos_embed && phases > self.max_phases) {
            return Err(Error::DimensionMismatch(format!(
                "{phases} phases outside 1..={} supported by the temporal position table",
                self.max_phases
            )));
        }
        Ok(())
    }
}

/// Geometry of an input batch `B x C x H x W x T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub phases: usize,
}

impl BatchDims {
    pub fn frames(&self) -> usize {
        self.batch * self.phases
    }
}

/// Token grid handed between encoder, blocks and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenDims {
    pub batch: usize,
    pub phases: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub prompts: PromptTable,
}

impl<T: Real> Model<T> {
    /// Builds and initializes every parameter deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut b = Builder { store: &mut store, seed };
        encoder::register(&mut b, &config);
        for i in 0..config.num_blocks {
            block::register(&mut b, &config, i);
        }
        b.layer_norm("neck.norm", config.embed_dim);
        decoder::register(&mut b, &config);
        let prompts = PromptTable::new(config.embed_dim, config.num_prompt_tokens);
        Ok(Self { config, params: store, prompts })
    }

    pub fn partition(&self) -> Partition {
        self.params.partition()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), prompts: self.prompts.clone() }
    }

    /// Prompt tokens for each clip, laid out `[B*T, P, C]`.
    pub fn prompt_tokens(&self, g: &mut Graph<T>, views: &[View], phases: usize) -> Var {
        let (p, c) = (self.prompts.tokens(), self.prompts.dim());
        let mut data = Vec::with_capacity(views.len() * phases * p * c);
        for view in views {
            let e = self.prompts.embed(*view);
            for _ in 0..phases {
                data.extend(e.iter().map(|v| T::of(*v)));
            }
        }
        g.tape.constant(Tensor::new(vec![views.len() * phases, p, c], data))
    }

    /// Full network on `images: [B, C, H, W, T]`, returning logits `[B, 1, H, W, T]`.
    /// `views` selects one prompt per clip; `None` runs the prompt-free variant.
    pub fn forward(&self, g: &mut Graph<T>, images: Var, views: Option<&[View]>) -> Result<Var> {
        let s = g.shape(images);
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "expected [B, {}, H, W, T] input, got {s:?}",
                self.config.in_channels
            )));
        }
        let dims = BatchDims { batch: s[0], height: s[2], width: s[3], phases: s[4] };
        self.config.check_geometry(dims.height, dims.width, dims.phases)?;
        if let Some(v) = views {
            if v.len() != dims.batch {
                return Err(Error::Shape(format!("{} prompts for a batch of {}", v.len(), dims.batch)));
            }
        }
        let (mut tokens, skips, tdims) = encoder_forward(g, &self.config, images, dims)?;
        for i in 0..self.config.num_blocks {
            tokens = block_forward(g, &self.config, i, tokens, tdims, true)?;
        }
        let tokens = g.layer_norm("neck.norm", tokens);
        let prompt = views.map(|v| self.prompt_tokens(g, v, dims.phases));
        decoder_forward(g, &self.config, tokens, &skips, prompt, tdims)
    }

    /// Inference on a flat `[B, C, H, W, T]` buffer; returns logits in the same layout.
    pub fn predict_logits(&self, images: &[T], dims: BatchDims, views: Option<&[View]>) -> Result<Vec<T>> {
        let shape = vec![dims.batch, self.config.in_channels, dims.height, dims.width, dims.phases];
        if images.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for input {shape:?}", images.len())));
        }
        let mut g = Graph::bind(&self.params, false);
        let x = g.tape.constant(Tensor::new(shape, images.to_vec()));
        let out = self.forward(&mut g, x, views)?;
        Ok(g.tape.value(out).data().to_vec())
    }

    /// `(frozen, trainable)` scalar parameter counts.
    pub fn count_parameters(&self) -> (usize, usize) {
        self.params.count()
    }
}

#[cfg(test)]
mod tests;
