//! Two-way transformer mask decoder with a transposed-convolution upscaler.

use super::layers::{conv_transpose2x2, linear, merge_heads, mlp_relu, norm, resize_maps, sdpa, split_heads};
use super::params::{Init, Layout};
use super::{ModelConfig, ParameterSet};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;
const EPS_2D: f64 = 1e-6;

fn attention_layout(l: &mut Layout, prefix: &str, dim: usize, internal: usize) {
    l.linear(&format!("{prefix}.q_proj"), dim, internal, true);
    l.linear(&format!("{prefix}.k_proj"), dim, internal, true);
    l.linear(&format!("{prefix}.v_proj"), dim, internal, true);
    l.linear(&format!("{prefix}.out_proj"), internal, dim, true);
}

pub(crate) fn layout(c: &ModelConfig, l: &mut Layout) {
    let d = c.decoder_dim;
    let down = d / c.attention_downsample_rate;
    l.push("mask_decoder.iou_token.weight", &[1, d], Init::Normal(1.0));
    l.push(
        "mask_decoder.mask_tokens.weight",
        &[c.num_mask_tokens, d],
        Init::Normal(1.0),
    );
    for i in 0..c.decoder_depth {
        let p = format!("mask_decoder.transformer.layers.{i}");
        attention_layout(l, &format!("{p}.self_attn"), d, d);
        l.norm(&format!("{p}.norm1"), d);
        attention_layout(l, &format!("{p}.cross_attn_token_to_image"), d, down);
        l.norm(&format!("{p}.norm2"), d);
        l.linear(&format!("{p}.mlp.lin1"), d, c.decoder_mlp_dim, true);
        l.linear(&format!("{p}.mlp.lin2"), c.decoder_mlp_dim, d, true);
        l.norm(&format!("{p}.norm3"), d);
        l.norm(&format!("{p}.norm4"), d);
        attention_layout(l, &format!("{p}.cross_attn_image_to_token"), d, down);
    }
    attention_layout(l, "mask_decoder.transformer.final_attn_token_to_image", d, down);
    l.norm("mask_decoder.transformer.norm_final_attn", d);
    l.conv_transpose("mask_decoder.output_upscaling.conv1", d, d / 4, 2);
    l.norm("mask_decoder.output_upscaling.norm", d / 4);
    l.conv_transpose("mask_decoder.output_upscaling.conv2", d / 4, d / 8, 2);
    for i in 0..c.num_mask_tokens {
        l.mlp(&format!("mask_decoder.output_hypernetworks.{i}"), d, d, d / 8, 3);
    }
    l.mlp(
        "mask_decoder.iou_prediction_head",
        d,
        c.iou_head_hidden_dim,
        c.num_mask_tokens,
        3,
    );
}

fn attend(p: &ParameterSet, prefix: &str, heads: usize, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let q = split_heads(&linear(q, p, &format!("{prefix}.q_proj")), heads);
    let k = split_heads(&linear(k, p, &format!("{prefix}.k_proj")), heads);
    let v = split_heads(&linear(v, p, &format!("{prefix}.v_proj")), heads);
    linear(&merge_heads(&sdpa(&q, &k, &v)), p, &format!("{prefix}.out_proj"))
}

/// Decodes mask logits.
///
/// `image` is `(B, h, w, C)`, `image_pe` is `(h, w, C)` and `sparse` is
/// `(B, T, C)`. Returns logits `(B, S, S)` with `S = patch_input_size`.
pub(crate) fn forward(c: &ModelConfig, p: &ParameterSet, image: &Tensor, image_pe: &Tensor, sparse: &Tensor) -> Tensor {
    let [b, h, w, d] = image.shape().try_into().expect("image embedding is (B, h, w, C)");
    let heads = c.decoder_num_heads;
    let m = c.num_mask_tokens;

    let output_tokens = Tensor::concat(
        &[
            p.get("mask_decoder.iou_token.weight").clone(),
            p.get("mask_decoder.mask_tokens.weight").clone(),
        ],
        0,
    );
    let n_out = 1 + m;
    let per_batch: Vec<Tensor> = (0..b)
        .map(|bi| {
            let s = sparse.narrow(0, bi, 1);
            let t = s.dim(1);
            Tensor::concat(&[output_tokens.reshape(&[1, n_out, d]), s.reshape(&[1, t, d])], 1)
        })
        .collect();
    let tokens = Tensor::concat(&per_batch, 0);

    let no_mask = p.get("prompt_encoder.no_mask_embed.weight").reshape(&[d]);
    let mut keys = image.add(&no_mask).reshape(&[b, h * w, d]);
    let key_pe = image_pe.reshape(&[h * w, d]);
    let query_pe = tokens.clone();
    let mut queries = tokens.clone();

    for i in 0..c.decoder_depth {
        let pre = format!("mask_decoder.transformer.layers.{i}");
        queries = if i == 0 {
            attend(p, &format!("{pre}.self_attn"), heads, &queries, &queries, &queries)
        } else {
            let q = queries.add(&query_pe);
            queries.add(&attend(p, &format!("{pre}.self_attn"), heads, &q, &q, &queries))
        };
        queries = norm(&queries, p, &format!("{pre}.norm1"), EPS);

        let q = queries.add(&query_pe);
        let k = keys.add(&key_pe);
        let a = attend(p, &format!("{pre}.cross_attn_token_to_image"), heads, &q, &k, &keys);
        queries = norm(&queries.add(&a), p, &format!("{pre}.norm2"), EPS);

        let mlp = linear(
            &linear(&queries, p, &format!("{pre}.mlp.lin1")).relu(),
            p,
            &format!("{pre}.mlp.lin2"),
        );
        queries = norm(&queries.add(&mlp), p, &format!("{pre}.norm3"), EPS);

        let q = queries.add(&query_pe);
        let k = keys.add(&key_pe);
        let a = attend(p, &format!("{pre}.cross_attn_image_to_token"), heads, &k, &q, &queries);
        keys = norm(&keys.add(&a), p, &format!("{pre}.norm4"), EPS);
    }
    let q = queries.add(&query_pe);
    let k = keys.add(&key_pe);
    let a = attend(
        p,
        "mask_decoder.transformer.final_attn_token_to_image",
        heads,
        &q,
        &k,
        &keys,
    );
    queries = norm(&queries.add(&a), p, "mask_decoder.transformer.norm_final_attn", EPS);

    let src = keys.reshape(&[b, h, w, d]);
    let up = conv_transpose2x2(&src, p, "mask_decoder.output_upscaling.conv1");
    let up = norm(&up, p, "mask_decoder.output_upscaling.norm", EPS_2D).gelu();
    let up = conv_transpose2x2(&up, p, "mask_decoder.output_upscaling.conv2").gelu();
    let (uh, uw, uc) = (4 * h, 4 * w, d / 8);

    // single-mask output: first mask token through its hypernetwork
    let token = queries.narrow(1, 1, 1);
    let hyper = mlp_relu(&token, p, "mask_decoder.output_hypernetworks.0", 3);
    let masks = up.reshape(&[b, uh * uw, uc]).matmul(&hyper, true).reshape(&[b, uh, uw]);
    resize_maps(&masks, c.patch_input_size)
}
