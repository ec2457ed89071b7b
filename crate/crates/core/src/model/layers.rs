//! Building blocks shared by the encoder and decoder. Spatial tensors are
//! channel-last: `(B, H, W, C)`.

use std::sync::Arc;

use super::ParameterSet;
use crate::tensor::{Tensor, ZERO_INDEX};

pub(crate) fn linear(x: &Tensor, p: &ParameterSet, prefix: &str) -> Tensor {
    let bias = format!("{prefix}.bias");
    let b = p.contains(&bias).then(|| p.get(&bias));
    x.linear(p.get(&format!("{prefix}.weight")), b)
}

pub(crate) fn norm(x: &Tensor, p: &ParameterSet, prefix: &str, eps: f64) -> Tensor {
    x.layer_norm(
        p.get(&format!("{prefix}.weight")),
        p.get(&format!("{prefix}.bias")),
        eps,
    )
}

/// Stack of linear layers with ReLU between them.
pub(crate) fn mlp_relu(x: &Tensor, p: &ParameterSet, prefix: &str, layers: usize) -> Tensor {
    let mut h = x.clone();
    for i in 0..layers {
        h = linear(&h, p, &format!("{prefix}.layers.{i}"));
        if i + 1 < layers {
            h = h.relu();
        }
    }
    h
}

/// Conv weight `(out, in, k, k)` viewed as a linear weight `(out, in*k*k)`.
pub(crate) fn conv_as_linear(p: &ParameterSet, prefix: &str) -> Tensor {
    let w = p.get(&format!("{prefix}.weight"));
    let s = w.shape();
    w.reshape(&[s[0], s[1] * s[2] * s[3]])
}

/// im2col for a stride-1 `k x k` convolution with zero padding `k / 2`.
/// Output columns are ordered `(c, ky, kx)` to match PyTorch weights.
pub(crate) fn im2col_same(x: &Tensor, k: usize) -> Tensor {
    let [b, h, w, c] = x.shape().try_into().expect("im2col needs (B, H, W, C)");
    let r = (k / 2) as isize;
    let mut index = Vec::with_capacity(b * h * w * c * k * k);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - r;
                            let sx = xx as isize + kx as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                index.push(ZERO_INDEX);
                            } else {
                                index.push(((bi * h + sy as usize) * w + sx as usize) * c + ch);
                            }
                        }
                    }
                }
            }
        }
    }
    x.gather(&[b, h, w, c * k * k], Arc::new(index))
}

/// Stride-2, kernel-2 transposed convolution with PyTorch weight `(in, out, 2, 2)`.
pub(crate) fn conv_transpose2x2(x: &Tensor, p: &ParameterSet, prefix: &str) -> Tensor {
    let [b, h, w, _] = x.shape().try_into().expect("conv_transpose needs (B, H, W, C)");
    let weight = p.get(&format!("{prefix}.weight"));
    let (cin, cout) = (weight.dim(0), weight.dim(1));
    let wm = weight.reshape(&[cin, cout * 4]);
    let y = x.matmul(&wm, false).reshape(&[b, h, w, cout, 2, 2]);
    y.permute(&[0, 1, 4, 2, 5, 3])
        .reshape(&[b, 2 * h, 2 * w, cout])
        .add(p.get(&format!("{prefix}.bias")))
}

/// Split `(B, N, heads*c)` into `(B, heads, N, c)`.
pub(crate) fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let [b, n, d] = x.shape().try_into().expect("split_heads needs (B, N, D)");
    x.reshape(&[b, n, heads, d / heads]).permute(&[0, 2, 1, 3])
}

pub(crate) fn merge_heads(x: &Tensor) -> Tensor {
    let [b, h, n, c] = x.shape().try_into().expect("merge_heads needs (B, h, N, c)");
    x.permute(&[0, 2, 1, 3]).reshape(&[b, n, h * c])
}

/// Scaled dot-product attention on `(..., N, c)` operands.
pub(crate) fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let c = *q.shape().last().unwrap();
    q.matmul(k, true)
        .scale(1.0 / (c as f64).sqrt())
        .softmax_last()
        .matmul(v, false)
}

/// 1-D linear interpolation weights for PyTorch `align_corners=False`
/// resizing from `n_in` to `n_out`, as an `(n_out, n_in)` matrix.
pub(crate) fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - f;
        m[o * n_in + i1] += f;
    }
    m
}

/// Bilinear resize of `(B, H, W)` maps to `(B, out, out)`.
pub(crate) fn resize_maps(x: &Tensor, out: usize) -> Tensor {
    let [b, h, w] = x.shape().try_into().expect("resize_maps needs (B, H, W)");
    if h == out && w == out {
        return x.clone();
    }
    let rh = Tensor::new(bilinear_matrix(h, out), &[out, h]);
    let rw = Tensor::new(bilinear_matrix(w, out), &[out, w]);
    // rows: (B, H, W) @ rw^T -> (B, H, out); then transpose and repeat for rows
    let cols = x.matmul(&rw, true);
    cols.t().matmul(&rh, true).t().reshape(&[b, out, out])
}

/// Plain-data bilinear resize of one `h x w` single-channel image.
pub(crate) fn resize_plain(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let rh = bilinear_matrix(h, out_h);
    let rw = bilinear_matrix(w, out_w);
    let mut tmp = vec![0.0; h * out_w];
    for r in 0..h {
        for o in 0..out_w {
            tmp[r * out_w + o] = (0..w).map(|c| rw[o * w + c] * src[r * w + c]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for o in 0..out_h {
        for r in 0..h {
            let f = rh[o * h + r];
            if f != 0.0 {
                for c in 0..out_w {
                    out[o * out_w + c] += f * tmp[r * out_w + c];
                }
            }
        }
    }
    out
}
