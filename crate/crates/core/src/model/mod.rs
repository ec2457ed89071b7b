//! Promptable segmentation model: image encoder, box-prompt encoder and mask
//! decoder over a named parameter set.

mod config;
mod decoder;
mod encoder;
mod layers;
mod params;
mod pretrained;
mod prompt;

pub use config::{Backbone, ModelConfig, TOY_PARAMETER_LIMIT};
pub use params::{Param, ParamGroup, ParameterSet};
pub use pretrained::{translation_manifest, WEIGHTS_ENV};

use crate::error::{Error, Result};
use crate::imaging::Grid;
use crate::prompts::BoundingBox;
use crate::tensor::Tensor;

/// Encoder output for one patch, stored channel-last as `(h, w, C)`.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    tensor: Tensor,
}

impl ImageEmbedding {
    /// `(channels, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s[2], s[0], s[1])
    }

    /// Values in `(channels, h, w)` order.
    pub fn to_chw(&self) -> Vec<f64> {
        let (c, h, w) = self.shape();
        let d = self.tensor.data();
        let mut out = vec![0.0; c * h * w];
        for i in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + i] = d[i * c + ch];
            }
        }
        out
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn detach(&self) -> ImageEmbedding {
        ImageEmbedding {
            tensor: self.tensor.detach(),
        }
    }
}

/// Sparse prompt tokens `(n_tokens, channels)` for one box.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    tokens: Tensor,
    corners: [[f64; 2]; 2],
}

impl PromptEmbedding {
    pub fn shape(&self) -> (usize, usize) {
        (self.tokens.dim(0), self.tokens.dim(1))
    }

    /// Box corners `(x, y)` in `[0, 1]`, as fed to the positional encoding.
    pub fn normalized_corners(&self) -> [[f64; 2]; 2] {
        self.corners
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    params: ParameterSet,
}

/// Builds a model: random initialisation for the toy backbone, checkpoint
/// weights for the pretrained one.
pub fn build_model(config: &ModelConfig) -> Result<SegModel> {
    config.validate()?;
    let layout = params::model_layout(config);
    let params = match config.backbone {
        Backbone::Toy => {
            let p = ParameterSet::initialise(&layout, config.seed);
            if p.total_count() >= TOY_PARAMETER_LIMIT {
                return Err(Error::Config(format!(
                    "toy model has {} parameters, limit is {TOY_PARAMETER_LIMIT}",
                    p.total_count()
                )));
            }
            p
        }
        Backbone::PretrainedBase => pretrained::load_pretrained(config, &layout)?,
    };
    Ok(SegModel {
        config: config.clone(),
        params,
    })
}

/// Parameters left trainable by [`SegModel::freeze_encoders`], computed
/// from the layout alone so no weights are needed.
pub fn decoder_parameter_count(config: &ModelConfig) -> usize {
    params::model_layout(config)
        .0
        .iter()
        .filter(|e| ParamGroup::of(&e.name) == ParamGroup::MaskDecoder)
        .map(|e| e.shape.iter().product::<usize>())
        .sum()
}

impl SegModel {
    /// Wraps an existing parameter set, checking it against the config layout.
    pub fn from_parameters(config: &ModelConfig, params: ParameterSet) -> Result<SegModel> {
        config.validate()?;
        let layout = params::model_layout(config);
        if layout.0.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "config expects {} tensors, got {}",
                layout.0.len(),
                params.len()
            )));
        }
        for e in &layout.0 {
            match params.param(&e.name) {
                Some(p) if p.tensor().shape() == e.shape.as_slice() => {}
                Some(p) => {
                    return Err(Error::Incompatible(format!(
                        "'{}' has shape {:?}, expected {:?}",
                        e.name,
                        p.tensor().shape(),
                        e.shape
                    )))
                }
                None => return Err(Error::Incompatible(format!("missing tensor '{}'", e.name))),
            }
        }
        Ok(SegModel {
            config: config.clone(),
            params,
        })
    }

    /// Copy sharing no tensor storage with `self`.
    pub fn deep_clone(&self) -> SegModel {
        SegModel {
            config: self.config.clone(),
            params: self.params.deep_clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Decoder trainable; image and prompt encoders frozen. Idempotent.
    pub fn freeze_encoders(&mut self) {
        self.params.set_group_trainable(ParamGroup::ImageEncoder, false);
        self.params.set_group_trainable(ParamGroup::PromptEncoder, false);
        self.params.set_group_trainable(ParamGroup::MaskDecoder, true);
    }

    pub fn freeze_all(&mut self) {
        for g in [
            ParamGroup::ImageEncoder,
            ParamGroup::PromptEncoder,
            ParamGroup::MaskDecoder,
        ] {
            self.params.set_group_trainable(g, false);
        }
    }

    pub fn encoders_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) != ParamGroup::MaskDecoder)
            .all(|(_, p)| !p.trainable())
    }

    pub fn count_trainable(&self) -> usize {
        self.params.trainable_count()
    }

    /// Embeds a `patch_input_size` square patch with values in `[0, 1]`.
    pub fn encode_image(&self, patch: &Grid<f64>) -> Result<ImageEmbedding> {
        Ok(self.encode_images(std::slice::from_ref(patch))?.remove(0))
    }

    pub fn encode_images(&self, patches: &[Grid<f64>]) -> Result<Vec<ImageEmbedding>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let pixels = self.pixel_tensor(patches)?;
        let out = encoder::forward(&self.config, &self.params, &pixels);
        let [b, h, w, c] = out.shape().try_into().unwrap();
        Ok((0..b)
            .map(|i| ImageEmbedding {
                tensor: out.narrow(0, i, 1).reshape(&[h, w, c]),
            })
            .collect())
    }

    fn pixel_tensor(&self, patches: &[Grid<f64>]) -> Result<Tensor> {
        let c = &self.config;
        let n = c.patch_input_size;
        let s = c.encoder_input_size;
        let cin = c.in_chans;
        let mut data = Vec::with_capacity(patches.len() * s * s * cin);
        for patch in patches {
            if patch.shape() != (n, n) {
                return Err(Error::shape(format!(
                    "encoder expects a {n}x{n} patch, got {:?}",
                    patch.shape()
                )));
            }
            let scaled: Vec<f64> = patch.data().iter().map(|v| v * 255.0).collect();
            let resized = layers::resize_plain(&scaled, n, n, s, s);
            for v in resized {
                for ch in 0..cin {
                    data.push((v - c.pixel_mean[ch]) / c.pixel_std[ch]);
                }
            }
        }
        Ok(Tensor::new(data, &[patches.len(), s, s, cin]))
    }

    /// Two corner tokens for a box on a `patch_input_size` patch.
    pub fn encode_prompt(&self, bbox: &BoundingBox) -> Result<PromptEmbedding> {
        let n = self.config.patch_input_size;
        bbox.validate(n, n)?;
        let span = (n - 1).max(1) as f64;
        let corners = [
            [bbox.x_min as f64 / span, bbox.y_min as f64 / span],
            [bbox.x_max as f64 / span, bbox.y_max as f64 / span],
        ];
        Ok(PromptEmbedding {
            tokens: prompt::encode_corners(&self.params, corners),
            corners,
        })
    }

    /// Logits map `patch_input_size x patch_input_size`.
    pub fn decode_mask(&self, image: &ImageEmbedding, prompt: &PromptEmbedding) -> Result<Grid<f64>> {
        let logits = self.decode_batch(&[image], &[prompt])?;
        let n = self.config.patch_input_size;
        Grid::new(n, n, logits.data().to_vec())
    }

    /// Batched decode returning `(B, S, S)` logits with the autodiff graph
    /// intact for training.
    pub fn decode_batch(&self, images: &[&ImageEmbedding], prompts: &[&PromptEmbedding]) -> Result<Tensor> {
        if images.len() != prompts.len() || images.is_empty() {
            return Err(Error::shape(format!(
                "{} image embeddings for {} prompts",
                images.len(),
                prompts.len()
            )));
        }
        let (gh, gw) = self.config.embedding_grid();
        let d = self.config.decoder_dim;
        for e in images {
            if e.shape() != (d, gh, gw) {
                return Err(Error::shape(format!(
                    "image embedding {:?} does not match ({d}, {gh}, {gw})",
                    e.shape()
                )));
            }
        }
        let t = prompts[0].shape().0;
        for pr in prompts {
            if pr.shape() != (t, d) {
                return Err(Error::shape(format!(
                    "prompt embedding {:?} does not match width {d}",
                    pr.shape()
                )));
            }
        }
        let b = images.len();
        let img = Tensor::concat(
            &images
                .iter()
                .map(|e| e.tensor.reshape(&[1, gh, gw, d]))
                .collect::<Vec<_>>(),
            0,
        );
        let sparse = Tensor::concat(
            &prompts.iter().map(|p| p.tokens.reshape(&[1, t, d])).collect::<Vec<_>>(),
            0,
        );
        debug_assert_eq!(img.dim(0), b);
        let pe = prompt::dense_pe(&self.params, gh, gw);
        Ok(decoder::forward(&self.config, &self.params, &img, &pe, &sparse))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SegModel {
        build_model(&ModelConfig::toy()).unwrap()
    }

    fn patch(v: f64) -> Grid<f64> {
        Grid::filled(256, 256, v)
    }

    #[test]
    fn toy_is_deterministic_and_small() {
        let a = toy();
        let b = toy();
        assert_eq!(a.params().snapshot(), b.params().snapshot());
        assert!(a.params().total_count() < TOY_PARAMETER_LIMIT);
    }

    #[test]
    fn frozen_count_is_decoder_size() {
        let mut m = toy();
        m.freeze_encoders();
        let flags: Vec<_> = m.params().iter().map(|(_, p)| p.trainable()).collect();
        m.freeze_encoders();
        let again: Vec<_> = m.params().iter().map(|(_, p)| p.trainable()).collect();
        assert_eq!(flags, again);
        let decoder: usize = m
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("mask_decoder."))
            .map(|(_, p)| p.tensor().shape().iter().product::<usize>())
            .sum();
        assert_eq!(m.count_trainable(), decoder);
        assert_eq!(decoder_parameter_count(m.config()), decoder);
        m.freeze_all();
        assert_eq!(m.count_trainable(), 0);
    }

    #[test]
    fn base_decoder_count_from_layout() {
        let n = decoder_parameter_count(&ModelConfig::pretrained_base());
        assert!((4_000_000..4_100_000).contains(&n), "{n}");
    }

    #[test]
    fn embedding_shapes_and_sensitivity() {
        let m = toy();
        let zero = m.encode_image(&patch(0.0)).unwrap();
        let one = m.encode_image(&patch(1.0)).unwrap();
        assert_eq!(zero.shape(), (32, 16, 16));
        assert_ne!(zero.to_chw(), one.to_chw());
        assert_eq!(zero.to_chw(), m.encode_image(&patch(0.0)).unwrap().to_chw());
        assert!(matches!(
            m.encode_image(&Grid::filled(128, 128, 0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn prompt_normalisation_and_sensitivity() {
        let m = toy();
        let full = m.encode_prompt(&BoundingBox::new(0, 0, 255, 255)).unwrap();
        assert_eq!(full.normalized_corners(), [[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(full.shape(), (2, 32));
        let dot = m.encode_prompt(&BoundingBox::new(9, 9, 9, 9)).unwrap();
        assert_ne!(full.tokens().data(), dot.tokens().data());
        assert!(matches!(
            m.encode_prompt(&BoundingBox::new(0, 0, 256, 10)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn decode_shape_and_prompt_influence() {
        let m = toy();
        let e = m.encode_image(&patch(0.3)).unwrap();
        let a = m
            .decode_mask(&e, &m.encode_prompt(&BoundingBox::new(0, 0, 255, 255)).unwrap())
            .unwrap();
        let b = m
            .decode_mask(&e, &m.encode_prompt(&BoundingBox::new(10, 20, 60, 90)).unwrap())
            .unwrap();
        assert_eq!(a.shape(), (256, 256));
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn frozen_encoders_receive_no_gradient() {
        let mut m = toy();
        m.freeze_encoders();
        let pixels = Grid::from_fn(256, 256, |r, c| ((r * 7 + c * 3) % 17) as f64 / 16.0);
        let e = m.encode_image(&pixels).unwrap();
        let p = m.encode_prompt(&BoundingBox::new(30, 40, 200, 220)).unwrap();
        let logits = m.decode_batch(&[&e], &[&p]).unwrap();
        let grads = logits.backward(&vec![1.0; logits.numel()]);
        for (name, param) in m.params().iter() {
            let g = grads.get(param.tensor());
            if name.starts_with("mask_decoder.") {
                continue;
            }
            assert!(g.is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{name} got a gradient");
        }
        let hyper = m.params().get("mask_decoder.output_hypernetworks.0.layers.2.weight");
        assert!(grads.get(hyper).unwrap().iter().any(|&v| v != 0.0));
    }
}
