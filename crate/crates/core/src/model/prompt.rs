//! Box-prompt encoder: random-Fourier positional encoding of the two corners.

use std::f64::consts::PI;

use super::params::{Init, Layout};
use super::{ModelConfig, ParameterSet};
use crate::tensor::Tensor;

pub(crate) fn layout(c: &ModelConfig, l: &mut Layout) {
    let d = c.decoder_dim;
    l.push("prompt_encoder.pe_gaussian", &[2, d / 2], Init::Normal(1.0));
    for i in 0..4 {
        l.push(
            format!("prompt_encoder.point_embeddings.{i}.weight"),
            &[1, d],
            Init::Normal(1.0),
        );
    }
    l.push("prompt_encoder.not_a_point.weight", &[1, d], Init::Normal(1.0));
    l.push("prompt_encoder.no_mask_embed.weight", &[1, d], Init::Normal(1.0));
    // Mask-prompt branch; kept so checkpoints carry the full tensor set.
    let m = c.mask_in_chans;
    l.conv("prompt_encoder.mask_downscaling.0", 1, m / 4, 2, true);
    l.norm("prompt_encoder.mask_downscaling.1", m / 4);
    l.conv("prompt_encoder.mask_downscaling.3", m / 4, m, 2, true);
    l.norm("prompt_encoder.mask_downscaling.4", m);
    l.conv("prompt_encoder.mask_downscaling.6", m, d, 1, true);
}

/// Fourier features of `(N, 2)` coordinates in `[0, 1]`, giving `(N, C)`.
pub(crate) fn positional_encoding(p: &ParameterSet, coords: &Tensor) -> Tensor {
    let proj = coords
        .affine(2.0, -1.0)
        .matmul(p.get("prompt_encoder.pe_gaussian"), false)
        .scale(2.0 * PI);
    Tensor::concat(&[proj.sin(), proj.cos()], 1)
}

/// Dense encoding of the embedding grid's cell centres, `(h, w, C)`.
pub(crate) fn dense_pe(p: &ParameterSet, h: usize, w: usize) -> Tensor {
    let mut coords = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            coords.push((j as f64 + 0.5) / w as f64);
            coords.push((i as f64 + 0.5) / h as f64);
        }
    }
    let pe = positional_encoding(p, &Tensor::new(coords, &[h * w, 2]));
    let c = pe.dim(1);
    pe.reshape(&[h, w, c])
}

/// Two corner tokens `(2, C)` for corners already normalized to `[0, 1]`.
pub(crate) fn encode_corners(p: &ParameterSet, corners: [[f64; 2]; 2]) -> Tensor {
    let coords = Tensor::new(corners.iter().flatten().copied().collect(), &[2, 2]);
    let pe = positional_encoding(p, &coords);
    let labels = Tensor::concat(
        &[
            p.get("prompt_encoder.point_embeddings.2.weight").clone(),
            p.get("prompt_encoder.point_embeddings.3.weight").clone(),
        ],
        0,
    );
    pe.add(&labels)
}
