//! Dense f64 tensors with a tape-free reverse-mode autodiff.
//!
//! Every op records its parents and a backward closure only when at least one
//! parent requires a gradient, so inference through frozen weights builds no
//! graph at all. Node ids grow monotonically, which makes "descending id" a
//! valid reverse topological order for the backward sweep.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Index value in a gather map that produces a zero (used for padding).
pub const ZERO_INDEX: usize = usize::MAX;

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Leaf gradients produced by [`Tensor::backward`], keyed by leaf identity.
#[derive(Debug, Default)]
pub struct Gradients(HashMap<u64, Vec<f64>>);

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.0.get(&t.0.id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * rsc].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access
    // implied by (m, k, n) and the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn from_op<F>(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: F) -> Self
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        assert_eq!(numel(&shape), data.len(), "op produced inconsistent data");
        if parents.iter().any(Tensor::requires_grad) {
            Tensor(Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad: true,
                parents,
                backward: Some(Box::new(backward)),
            }))
        } else {
            Self::make(shape, data, false)
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self::make(shape.to_vec(), data, false)
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self::make(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Tensor {
        Self::new(self.0.data.clone(), &self.0.shape)
    }

    /// Reverse-mode sweep from `self`, seeded with `seed` (same length as self).
    pub fn backward(&self, seed: &[f64]) -> Gradients {
        assert_eq!(seed.len(), self.numel(), "seed gradient has wrong length");
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return out;
        }
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            stack.extend(t.0.parents.iter().cloned());
            order.push(t);
        }
        order.sort_by_key(|n| std::cmp::Reverse(n.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, seed.to_vec());
        for node in order {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    out.0.insert(node.0.id, g);
                }
                Some(f) => {
                    let mask: Vec<bool> = node.0.parents.iter().map(Tensor::requires_grad).collect();
                    let grads = f(&g, &mask);
                    for (parent, grad) in node.0.parents.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                            None => {
                                pending.insert(parent.0.id, grad);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape()
        );
        Tensor::from_op(shape.to_vec(), self.0.data.clone(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    pub fn gather(&self, out_shape: &[usize], index: Arc<Vec<usize>>) -> Tensor {
        assert_eq!(
            numel(out_shape),
            index.len(),
            "gather index does not match output shape"
        );
        let src = &self.0.data;
        let data = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { src[i] })
            .collect();
        let n_in = self.numel();
        Tensor::from_op(out_shape.to_vec(), data, vec![self.clone()], move |g, _| {
            let mut gi = vec![0.0; n_in];
            for (&i, &gv) in index.iter().zip(g) {
                if i != ZERO_INDEX {
                    gi[i] += gv;
                }
            }
            vec![Some(gi)]
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&out_shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; out_shape.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            index.push(offset);
            for ax in (0..out_shape.len()).rev() {
                counter[ax] += 1;
                offset += src_strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                counter[ax] = 0;
            }
        }
        self.gather(&out_shape, Arc::new(index))
    }

    /// Swap the two trailing axes.
    pub fn t(&self) -> Tensor {
        let n = self.ndim();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            index.extend(base..base + len * inner);
        }
        self.gather(&out_shape, Arc::new(index))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        for p in parts {
            assert_eq!(p.ndim(), first.len(), "concat rank mismatch");
            assert_eq!(&p.shape()[..axis], &first[..axis], "concat outer mismatch");
            assert_eq!(&p.shape()[axis + 1..], &first[axis + 1..], "concat inner mismatch");
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.dim(axis) * inner).collect();
        let total_width: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_width);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = total_width / inner;
        Tensor::from_op(out_shape, data, parts.to_vec(), move |g, mask| {
            let mut grads: Vec<Option<Vec<f64>>> = widths
                .iter()
                .zip(mask)
                .map(|(&w, &m)| m.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut off = o * total_width;
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        })
    }

    // ----------------------------------------------------------- elementwise

    fn unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let data: Vec<f64> = self.0.data.iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out_vals = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            let gi = g
                .iter()
                .zip(input.data())
                .zip(&out_vals)
                .map(|((&gv, &x), &y)| gv * df(x, y))
                .collect();
            vec![Some(gi)]
        })
    }

    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.unary(move |x| x * mul + add, move |_, _| mul)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        self.unary(
            |x| 0.5 * x * (1.0 + libm::erf(x * INV_SQRT2)),
            move |x, _| 0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * inv_sqrt_2pi * (-0.5 * x * x).exp(),
        )
    }

    pub fn sin(&self) -> Tensor {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    fn check_suffix(&self, other: &Tensor) {
        let (a, b) = (self.shape(), other.shape());
        assert!(
            b.len() <= a.len() && a[a.len() - b.len()..] == *b,
            "cannot broadcast {b:?} onto {a:?}"
        );
    }

    /// `self + other`, where `other`'s shape is a suffix of `self`'s.
    pub fn add(&self, other: &Tensor) -> Tensor {
        self.check_suffix(other);
        let nb = other.numel();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + other.data()[i % nb])
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, mask| {
                let ga = mask[0].then(|| g.to_vec());
                let gb = mask[1].then(|| {
                    let mut gb = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![ga, gb]
            },
        )
    }

    /// `self * other` elementwise, with the same suffix broadcasting as [`add`](Self::add).
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.check_suffix(other);
        let nb = other.numel();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * other.data()[i % nb])
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, mask| {
                let ga = mask[0].then(|| g.iter().enumerate().map(|(i, &gv)| gv * b.data()[i % nb]).collect());
                let gb = mask[1].then(|| {
                    let mut gb = vec![0.0; nb];
                    for (i, (&gv, &av)) in g.iter().zip(a.data()).enumerate() {
                        gb[i % nb] += gv * av;
                    }
                    gb
                });
                vec![ga, gb]
            },
        )
    }

    // ---------------------------------------------------------------- matmul

    /// Matrix product over the two trailing axes.
    ///
    /// `self` is `(..., m, k)`. `other` is either a shared 2-D matrix
    /// (`(k, n)`, or `(n, k)` with `transpose_other`) or carries the same
    /// leading batch axes as `self`.
    pub fn matmul(&self, other: &Tensor, transpose_other: bool) -> Tensor {
        let a_shape = self.shape();
        let b_shape = other.shape();
        assert!(a_shape.len() >= 2 && b_shape.len() >= 2, "matmul needs rank >= 2");
        let m = a_shape[a_shape.len() - 2];
        let k = a_shape[a_shape.len() - 1];
        let (bk, n) = {
            let r = b_shape[b_shape.len() - 2];
            let c = b_shape[b_shape.len() - 1];
            if transpose_other {
                (c, r)
            } else {
                (r, c)
            }
        };
        assert_eq!(k, bk, "matmul inner dims {a_shape:?} x {b_shape:?}");
        let shared = b_shape.len() == 2;
        let batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        if !shared {
            assert_eq!(
                &a_shape[..a_shape.len() - 2],
                &b_shape[..b_shape.len() - 2],
                "matmul batch dims differ"
            );
        }
        // Strides of the logical (k, n) right operand in its stored layout.
        let b_strides = if transpose_other { (1, k) } else { (n, 1) };
        // Strides of its logical transpose (n, k).
        let bt_strides = if transpose_other { (k, 1) } else { (1, n) };

        let mut data = vec![0.0; batch * m * n];
        if shared {
            gemm(
                batch * m,
                k,
                n,
                self.data(),
                (k, 1),
                other.data(),
                b_strides,
                &mut data,
                n,
                0.0,
            );
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[bi * m * k..],
                    (k, 1),
                    &other.data()[bi * k * n..],
                    b_strides,
                    &mut data[bi * m * n..],
                    n,
                    0.0,
                );
            }
        }
        let mut out_shape = a_shape[..a_shape.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(out_shape, data, vec![self.clone(), other.clone()], move |g, mask| {
            let ga = mask[0].then(|| {
                let mut ga = vec![0.0; batch * m * k];
                if shared {
                    gemm(batch * m, n, k, g, (n, 1), b.data(), bt_strides, &mut ga, k, 0.0);
                } else {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n, 1),
                            &b.data()[bi * k * n..],
                            bt_strides,
                            &mut ga[bi * m * k..],
                            k,
                            0.0,
                        );
                    }
                }
                ga
            });
            let gb = mask[1].then(|| {
                let rows = if shared { batch * m } else { m };
                let reps = if shared { 1 } else { batch };
                let mut gb = vec![0.0; reps * k * n];
                for bi in 0..reps {
                    let a_off = bi * m * k;
                    let g_off = bi * m * n;
                    let out = &mut gb[bi * k * n..];
                    if transpose_other {
                        // stored (n, k) = g^T (n, rows) * a (rows, k)
                        gemm(n, rows, k, &g[g_off..], (1, n), &a.data()[a_off..], (k, 1), out, k, 0.0);
                    } else {
                        // stored (k, n) = a^T (k, rows) * g (rows, n)
                        gemm(k, rows, n, &a.data()[a_off..], (1, k), &g[g_off..], (n, 1), out, n, 0.0);
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// `self @ weight^T + bias` with PyTorch-layout `weight: (out, in)`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let y = self.matmul(weight, true);
        match bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    // ------------------------------------------------------- normalisations

    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape().last().expect("softmax on scalar");
        let mut data = self.0.data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let y = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            let mut gi = vec![0.0; g.len()];
            for ((gi, gr), yr) in gi.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in gi.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(gi)]
        })
    }

    /// Layer norm over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let d = *self.shape().last().expect("layer_norm on scalar");
        assert_eq!(gamma.shape(), [d], "layer_norm gamma shape");
        assert_eq!(beta.shape(), [d], "layer_norm beta shape");
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (x[j] - mean) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * gamma.data()[j] + beta.data()[j];
            }
        }
        let gamma_c = gamma.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, mask| {
                let gx = mask[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxh[j] = gr[j] * gamma_c.data()[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xh[j];
                        }
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] / d as f64 * (d as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    gx
                });
                let ggamma = mask[1].then(|| {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        gg.iter_mut().zip(gr.iter().zip(xr)).for_each(|(o, (a, b))| *o += a * b);
                    }
                    gg
                });
                let gbeta = mask[2].then(|| {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, a)| *o += a);
                    }
                    gb
                });
                vec![gx, ggamma, gbeta]
            },
        )
    }
}
