//! ViT image encoder with optional windowed attention and decomposed
//! relative positions, followed by the convolutional neck.

use std::sync::Arc;

use super::layers::{conv_as_linear, im2col_same, linear, merge_heads, norm};
use super::params::{Init, Layout};
use super::{ModelConfig, ParameterSet};
use crate::tensor::{Tensor, ZERO_INDEX};

const EPS: f64 = 1e-6;

pub(crate) fn layout(c: &ModelConfig, l: &mut Layout) {
    let d = c.encoder_embed_dim;
    let k = c.vit_patch_size;
    let (gh, gw) = c.embedding_grid();
    l.conv("image_encoder.patch_embed", c.in_chans, d, k, true);
    let pos_std = if c.backbone == super::Backbone::Toy { 0.1 } else { 0.02 };
    l.push("image_encoder.pos_embed", &[1, gh, gw, d], Init::Normal(pos_std));
    let head_dim = d / c.encoder_num_heads;
    for i in 0..c.encoder_depth {
        let b = format!("image_encoder.blocks.{i}");
        l.norm(&format!("{b}.norm1"), d);
        l.linear(&format!("{b}.attn.qkv"), d, 3 * d, true);
        l.linear(&format!("{b}.attn.proj"), d, d, true);
        if c.use_rel_pos {
            let size = block_window(c, i).unwrap_or(gh);
            l.push(format!("{b}.attn.rel_pos_h"), &[2 * size - 1, head_dim], Init::Zeros);
            l.push(format!("{b}.attn.rel_pos_w"), &[2 * size - 1, head_dim], Init::Zeros);
        }
        l.norm(&format!("{b}.norm2"), d);
        l.linear(&format!("{b}.mlp.lin1"), d, d * c.encoder_mlp_ratio, true);
        l.linear(&format!("{b}.mlp.lin2"), d * c.encoder_mlp_ratio, d, true);
    }
    let out = c.decoder_dim;
    l.conv("image_encoder.neck.conv1", d, out, 1, false);
    l.norm("image_encoder.neck.norm1", out);
    l.conv("image_encoder.neck.conv2", out, out, 3, false);
    l.norm("image_encoder.neck.norm2", out);
}

fn block_window(c: &ModelConfig, i: usize) -> Option<usize> {
    (c.window_size > 0 && !c.global_attn_indexes.contains(&i)).then_some(c.window_size)
}

/// Runs the encoder on `(B, S, S, in_chans)` normalized pixels, returning
/// `(B, gh, gw, decoder_dim)`.
pub(crate) fn forward(c: &ModelConfig, p: &ParameterSet, pixels: &Tensor) -> Tensor {
    let [b, s, _, cin] = pixels.shape().try_into().expect("encoder input is (B, S, S, C)");
    let k = c.vit_patch_size;
    let g = s / k;
    let d = c.encoder_embed_dim;
    let mut index = Vec::with_capacity(b * s * s * cin);
    for bi in 0..b {
        for i in 0..g {
            for j in 0..g {
                for ch in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            index.push(((bi * s + i * k + ky) * s + j * k + kx) * cin + ch);
                        }
                    }
                }
            }
        }
    }
    let patches = pixels.gather(&[b, g, g, cin * k * k], Arc::new(index));
    let w = conv_as_linear(p, "image_encoder.patch_embed");
    let mut x = patches
        .linear(&w, Some(p.get("image_encoder.patch_embed.bias")))
        .add(&p.get("image_encoder.pos_embed").reshape(&[g, g, d]));

    for i in 0..c.encoder_depth {
        let pre = format!("image_encoder.blocks.{i}");
        let h = norm(&x, p, &format!("{pre}.norm1"), EPS);
        let h = match block_window(c, i) {
            Some(ws) => {
                let (windows, padded) = window_partition(&h, ws);
                let a = attention(c, p, &pre, &windows);
                window_unpartition(&a, ws, padded, (g, g), b)
            }
            None => attention(c, p, &pre, &h),
        };
        x = x.add(&h);
        let m = linear(
            &norm(&x, p, &format!("{pre}.norm2"), EPS),
            p,
            &format!("{pre}.mlp.lin1"),
        )
        .gelu();
        x = x.add(&linear(&m, p, &format!("{pre}.mlp.lin2")));
    }

    let x = x.linear(&conv_as_linear(p, "image_encoder.neck.conv1"), None);
    let x = norm(&x, p, "image_encoder.neck.norm1", EPS);
    let x = im2col_same(&x, 3).linear(&conv_as_linear(p, "image_encoder.neck.conv2"), None);
    norm(&x, p, "image_encoder.neck.norm2", EPS)
}

/// Multi-head self-attention on `(B, H, W, D)`. Heads run one at a time to
/// bound peak memory on large grids.
fn attention(c: &ModelConfig, p: &ParameterSet, pre: &str, x: &Tensor) -> Tensor {
    let [b, h, w, d] = x.shape().try_into().unwrap();
    let heads = c.encoder_num_heads;
    let hd = d / heads;
    let qkv = linear(&x.reshape(&[b, h * w, d]), p, &format!("{pre}.attn.qkv"));
    // (B, N, 3, heads, hd) -> (3, heads, B, N, hd)
    let qkv = qkv.reshape(&[b, h * w, 3, heads, hd]).permute(&[2, 3, 0, 1, 4]);
    let rel = c.use_rel_pos.then(|| {
        (
            rel_table(p.get(&format!("{pre}.attn.rel_pos_h")), h, h),
            rel_table(p.get(&format!("{pre}.attn.rel_pos_w")), w, w),
        )
    });
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let pick = |j: usize| qkv.narrow(0, j, 1).narrow(1, hi, 1).reshape(&[b, h * w, hd]);
        let (q, k, v) = (pick(0), pick(1), pick(2));
        let mut attn = q.scale(scale).matmul(&k, true);
        if let Some((rh, rw)) = &rel {
            attn = attn.add_rel(&q, rh, rw, b, h, w);
        }
        outs.push(attn.softmax_last().matmul(&v, false));
    }
    // heads back to (B, N, heads*hd)
    let stacked = Tensor::concat(&outs, 0)
        .reshape(&[heads, b, h * w, hd])
        .permute(&[1, 0, 2, 3]);
    let merged = merge_heads(&stacked);
    linear(&merged, p, &format!("{pre}.attn.proj")).reshape(&[b, h, w, d])
}

/// Relative-position lookup `(q, k, c)` from a `(2*max - 1, c)` table.
fn rel_table(table: &Tensor, q: usize, k: usize) -> Tensor {
    let len = table.dim(0);
    let c = table.dim(1);
    assert_eq!(len, 2 * q.max(k) - 1, "relative position table does not match the grid");
    let qs = (k as f64 / q as f64).max(1.0);
    let ks = (q as f64 / k as f64).max(1.0);
    let mut index = Vec::with_capacity(q * k * c);
    for i in 0..q {
        for j in 0..k {
            let r = (i as f64 * qs - j as f64 * ks + (k as f64 - 1.0) * ks) as usize;
            index.extend((0..c).map(|ch| r * c + ch));
        }
    }
    table.gather(&[q, k, c], Arc::new(index))
}

trait RelPos {
    fn add_rel(&self, q: &Tensor, rh: &Tensor, rw: &Tensor, b: usize, h: usize, w: usize) -> Tensor;
}

impl RelPos for Tensor {
    /// Adds the decomposed relative-position bias to attention logits
    /// `(B, h*w, h*w)` given unscaled queries `(B, h*w, c)`.
    fn add_rel(&self, q: &Tensor, rh: &Tensor, rw: &Tensor, b: usize, h: usize, w: usize) -> Tensor {
        let c = q.dim(2);
        let q4 = q.reshape(&[b, h, w, c]);
        // rel_h[b, y, x, ky] = sum_c q[b, y, x, c] * rh[y, ky, c]
        let qh = q4.permute(&[1, 0, 2, 3]).reshape(&[h, b * w, c]);
        let rel_h = qh.matmul(rh, true).reshape(&[h, b, w, h]).permute(&[1, 0, 2, 3]);
        // rel_w[b, y, x, kx] = sum_c q[b, y, x, c] * rw[x, kx, c]
        let qw = q4.permute(&[2, 0, 1, 3]).reshape(&[w, b * h, c]);
        let rel_w = qw.matmul(rw, true).reshape(&[w, b, h, w]).permute(&[1, 2, 0, 3]);
        let n = h * w;
        let mut ih = Vec::with_capacity(b * n * n);
        let mut iw = Vec::with_capacity(b * n * n);
        for bi in 0..b {
            for qi in 0..n {
                for ky in 0..h {
                    for kx in 0..w {
                        ih.push((bi * n + qi) * h + ky);
                        iw.push((bi * n + qi) * w + kx);
                    }
                }
            }
        }
        let bias_h = rel_h.gather(&[b, n, n], Arc::new(ih));
        let bias_w = rel_w.gather(&[b, n, n], Arc::new(iw));
        self.add(&bias_h).add(&bias_w)
    }
}

/// `(B, H, W, C)` -> `(B * nW, ws, ws, C)`, zero-padding to a multiple of `ws`.
fn window_partition(x: &Tensor, ws: usize) -> (Tensor, (usize, usize)) {
    let [b, h, w, c] = x.shape().try_into().unwrap();
    let hp = h.div_ceil(ws) * ws;
    let wp = w.div_ceil(ws) * ws;
    let (nh, nw) = (hp / ws, wp / ws);
    let mut index = Vec::with_capacity(b * hp * wp * c);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for y in 0..ws {
                    for xx in 0..ws {
                        let (sy, sx) = (wy * ws + y, wx * ws + xx);
                        for ch in 0..c {
                            index.push(if sy < h && sx < w {
                                ((bi * h + sy) * w + sx) * c + ch
                            } else {
                                ZERO_INDEX
                            });
                        }
                    }
                }
            }
        }
    }
    (x.gather(&[b * nh * nw, ws, ws, c], Arc::new(index)), (hp, wp))
}

fn window_unpartition(x: &Tensor, ws: usize, (hp, wp): (usize, usize), (h, w): (usize, usize), b: usize) -> Tensor {
    let c = x.dim(3);
    let (nh, nw) = (hp / ws, wp / ws);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let win = (bi * nh + y / ws) * nw + xx / ws;
                let base = ((win * ws + y % ws) * ws + xx % ws) * c;
                index.extend(base..base + c);
            }
        }
    }
    x.gather(&[b, h, w, c], Arc::new(index))
}
