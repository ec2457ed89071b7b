use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parameter budget the toy preset must stay under.
pub const TOY_PARAMETER_LIMIT: usize = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// ViT-B image encoder loaded from the published base checkpoint.
    PretrainedBase,
    /// Small randomly initialised encoder with the same topology.
    Toy,
}

/// Architecture of the promptable segmentation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ModelConfigSpec")]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Side of the square patches fed to the model and of the logits it returns.
    pub patch_input_size: usize,
    /// Side the encoder sees; patches are bilinearly resized to it.
    pub encoder_input_size: usize,
    pub vit_patch_size: usize,
    pub in_chans: usize,
    pub encoder_embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_num_heads: usize,
    pub encoder_mlp_ratio: usize,
    /// 0 disables windowed attention.
    pub window_size: usize,
    pub global_attn_indexes: Vec<usize>,
    pub use_rel_pos: bool,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_num_heads: usize,
    pub decoder_mlp_dim: usize,
    pub attention_downsample_rate: usize,
    pub num_mask_tokens: usize,
    pub iou_head_hidden_dim: usize,
    pub mask_in_chans: usize,
    /// Per-channel normalisation on the 0-255 intensity scale.
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
    /// Initialisation seed (toy backbone; also used for any tensor the
    /// checkpoint does not provide).
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Desk-scale preset: 4 encoder blocks of width 32 on a 16x16 token grid.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: Backbone::Toy,
            patch_input_size: 256,
            encoder_input_size: 256,
            vit_patch_size: 16,
            in_chans: 1,
            encoder_embed_dim: 32,
            encoder_depth: 4,
            encoder_num_heads: 2,
            encoder_mlp_ratio: 4,
            window_size: 0,
            global_attn_indexes: Vec::new(),
            use_rel_pos: false,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_num_heads: 2,
            decoder_mlp_dim: 128,
            attention_downsample_rate: 2,
            num_mask_tokens: 1,
            iou_head_hidden_dim: 32,
            mask_in_chans: 4,
            pixel_mean: vec![127.5],
            pixel_std: vec![63.75],
            seed: 0,
            weights_path: None,
        }
    }

    /// ViT-B layout matching the published base checkpoint.
    pub fn pretrained_base() -> Self {
        ModelConfig {
            backbone: Backbone::PretrainedBase,
            patch_input_size: 256,
            encoder_input_size: 1024,
            vit_patch_size: 16,
            in_chans: 3,
            encoder_embed_dim: 768,
            encoder_depth: 12,
            encoder_num_heads: 12,
            encoder_mlp_ratio: 4,
            window_size: 14,
            global_attn_indexes: vec![2, 5, 8, 11],
            use_rel_pos: true,
            decoder_dim: 256,
            decoder_depth: 2,
            decoder_num_heads: 8,
            decoder_mlp_dim: 2048,
            attention_downsample_rate: 2,
            num_mask_tokens: 4,
            iou_head_hidden_dim: 256,
            mask_in_chans: 16,
            pixel_mean: vec![123.675, 116.28, 103.53],
            pixel_std: vec![58.395, 57.12, 57.375],
            seed: 0,
            weights_path: None,
        }
    }

    pub fn preset(backbone: Backbone) -> Self {
        match backbone {
            Backbone::Toy => Self::toy(),
            Backbone::PretrainedBase => Self::pretrained_base(),
        }
    }

    /// Token grid `(h, w)` of the image embedding.
    pub fn embedding_grid(&self) -> (usize, usize) {
        let g = self.encoder_input_size / self.vit_patch_size;
        (g, g)
    }

    /// Side of the low-resolution mask before the final resize.
    pub fn low_res_size(&self) -> usize {
        4 * self.embedding_grid().0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vit_patch_size == 0 || !self.encoder_input_size.is_multiple_of(self.vit_patch_size) {
            return fail(format!(
                "encoder input {} is not a multiple of the token size {}",
                self.encoder_input_size, self.vit_patch_size
            ));
        }
        if self.patch_input_size == 0 || !self.patch_input_size.is_multiple_of(self.vit_patch_size) {
            return fail(format!(
                "patch input {} is not a multiple of the token size {}",
                self.patch_input_size, self.vit_patch_size
            ));
        }
        if self.encoder_num_heads == 0 || !self.encoder_embed_dim.is_multiple_of(self.encoder_num_heads) {
            return fail("encoder width must divide evenly across heads".into());
        }
        let internal = self.decoder_dim / self.attention_downsample_rate.max(1);
        if self.decoder_num_heads == 0
            || !self.decoder_dim.is_multiple_of(self.decoder_num_heads)
            || !internal.is_multiple_of(self.decoder_num_heads)
        {
            return fail("decoder width must divide evenly across heads".into());
        }
        if !self.decoder_dim.is_multiple_of(8) {
            return fail("decoder width must be a multiple of 8".into());
        }
        if !self.mask_in_chans.is_multiple_of(4) || self.mask_in_chans == 0 {
            return fail("mask_in_chans must be a positive multiple of 4".into());
        }
        if self.num_mask_tokens == 0 {
            return fail("at least one mask token is required".into());
        }
        if self.pixel_mean.len() != self.in_chans || self.pixel_std.len() != self.in_chans {
            return fail("pixel_mean/pixel_std need one entry per input channel".into());
        }
        if self.global_attn_indexes.iter().any(|&i| i >= self.encoder_depth) {
            return fail("global attention index beyond encoder depth".into());
        }
        Ok(())
    }

    /// SHA-256 over the architecture fields (seed and weight path excluded).
    pub fn architecture_hash(&self) -> String {
        let mut arch = self.clone();
        arch.seed = 0;
        arch.weights_path = None;
        let bytes = serde_json::to_vec(&arch).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Deserialisation shape: every field optional, filled from the backbone preset.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigSpec {
    backbone: Option<Backbone>,
    patch_input_size: Option<usize>,
    encoder_input_size: Option<usize>,
    vit_patch_size: Option<usize>,
    in_chans: Option<usize>,
    encoder_embed_dim: Option<usize>,
    encoder_depth: Option<usize>,
    encoder_num_heads: Option<usize>,
    encoder_mlp_ratio: Option<usize>,
    window_size: Option<usize>,
    global_attn_indexes: Option<Vec<usize>>,
    use_rel_pos: Option<bool>,
    decoder_dim: Option<usize>,
    decoder_depth: Option<usize>,
    decoder_num_heads: Option<usize>,
    decoder_mlp_dim: Option<usize>,
    attention_downsample_rate: Option<usize>,
    num_mask_tokens: Option<usize>,
    iou_head_hidden_dim: Option<usize>,
    mask_in_chans: Option<usize>,
    pixel_mean: Option<Vec<f64>>,
    pixel_std: Option<Vec<f64>>,
    seed: Option<u64>,
    weights_path: Option<PathBuf>,
}

impl From<ModelConfigSpec> for ModelConfig {
    fn from(s: ModelConfigSpec) -> Self {
        let mut c = ModelConfig::preset(s.backbone.unwrap_or(Backbone::Toy));
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = s.$f { c.$f = v; } )* };
        }
        take!(
            patch_input_size,
            encoder_input_size,
            vit_patch_size,
            in_chans,
            encoder_embed_dim,
            encoder_depth,
            encoder_num_heads,
            encoder_mlp_ratio,
            window_size,
            global_attn_indexes,
            use_rel_pos,
            decoder_dim,
            decoder_depth,
            decoder_num_heads,
            decoder_mlp_dim,
            attention_downsample_rate,
            num_mask_tokens,
            iou_head_hidden_dim,
            mask_in_chans,
            pixel_mean,
            pixel_std,
            seed
        );
        c.weights_path = s.weights_path;
        c
    }
}
