//! Minimal neural-network primitives with explicit backward passes.
//!
//! Everything operates on single samples (`[C, H, W]` feature maps and flat
//! vectors); batching and parallelism live in the training loop. Convolutions
//! are 3x3, stride 1, zero-padded, lowered to one GEMM per layer via im2col.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::util::{s, Scalar};

/// Parameter storage arena: weight matrices and bias vectors, addressed by
/// the handles the layer structs carry. Keeping parameters in one place makes
/// optimizers, checkpoints, and gradient buffers structural copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub mats: Vec<Array2<T>>,
    pub vecs: Vec<Array1<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            mats: Vec::new(),
            vecs: Vec::new(),
        }
    }

    /// A same-shaped store with all entries zero, used for gradients and
    /// optimizer moments.
    pub fn zeros_like(&self) -> Self {
        Self {
            mats: self.mats.iter().map(|m| Array2::zeros(m.dim())).collect(),
            vecs: self.vecs.iter().map(|v| Array1::zeros(v.dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for m in &mut self.mats {
            m.fill(T::zero());
        }
        for v in &mut self.vecs {
            v.fill(T::zero());
        }
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            *a += b;
        }
        for (a, b) in self.vecs.iter_mut().zip(&other.vecs) {
            *a += b;
        }
    }

    pub fn total_len(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum::<usize>()
            + self.vecs.iter().map(|v| v.len()).sum::<usize>()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle of one dense layer inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseHandle {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Handle of one 3x3 convolution inside a [`ParamStore`]. The weight matrix
/// is stored pre-lowered as `[c_out, c_in * 9]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvHandle {
    pub w: usize,
    pub b: usize,
    pub c_in: usize,
    pub c_out: usize,
}

/// Registers a dense layer: He-normal weights, zero bias.
pub fn alloc_dense<T: Scalar>(
    store: &mut ParamStore<T>,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> DenseHandle {
    let std = (2.0 / in_dim as f64).sqrt();
    let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
        s::<T>(rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
    });
    store.mats.push(w);
    store.vecs.push(Array1::zeros(out_dim));
    DenseHandle {
        w: store.mats.len() - 1,
        b: store.vecs.len() - 1,
        in_dim,
        out_dim,
    }
}

/// Registers a 3x3 convolution: He-normal weights over fan-in c_in*9, zero
/// bias.
pub fn alloc_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    c_in: usize,
    c_out: usize,
    rng: &mut ChaCha8Rng,
) -> ConvHandle {
    let fan_in = c_in * 9;
    let std = (2.0 / fan_in as f64).sqrt();
    let w = Array2::from_shape_fn((c_out, fan_in), |_| {
        s::<T>(rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
    });
    store.mats.push(w);
    store.vecs.push(Array1::zeros(c_out));
    ConvHandle {
        w: store.mats.len() - 1,
        b: store.vecs.len() - 1,
        c_in,
        c_out,
    }
}

/// Lowers a `[C, H, W]` map into the `[C*9, H*W]` column matrix of a 3x3
/// zero-padded convolution.
fn im2col<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    let x_slice = x.as_slice().unwrap();
    {
        let cols_slice = cols.as_slice_mut().unwrap();
        for ci in 0..c {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = ci * 9 + ky * 3 + kx;
                    let row_base = row * h * w;
                    // Valid output x range for this kernel tap.
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_base = ci * h * w + sy as usize * w;
                        let dst_base = row_base + y * w;
                        let src = &x_slice[src_base + x_lo + kx - 1..src_base + x_hi + kx - 1];
                        cols_slice[dst_base + x_lo..dst_base + x_hi].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im<T: Scalar>(cols: &Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
    let mut x = Array3::zeros((c, h, w));
    let cols_slice = cols.as_slice().unwrap();
    {
        let x_slice = x.as_slice_mut().unwrap();
        for ci in 0..c {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = ci * 9 + ky * 3 + kx;
                    let row_base = row * h * w;
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_base = ci * h * w + sy as usize * w;
                        let src_base = row_base + y * w;
                        for i in 0..(x_hi - x_lo) {
                            x_slice[dst_base + x_lo + kx - 1 + i] =
                                x_slice[dst_base + x_lo + kx - 1 + i]
                                    + cols_slice[src_base + x_lo + i];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3x3 same-padding convolution forward: `y = W . im2col(x) + b`.
pub fn conv_forward<T: Scalar>(
    store: &ParamStore<T>,
    handle: &ConvHandle,
    x: &Array3<T>,
) -> Array3<T> {
    let (c, h, w) = x.dim();
    debug_assert_eq!(c, handle.c_in);
    let cols = im2col(x);
    let mut out2 = Array2::zeros((handle.c_out, h * w));
    general_mat_mul(T::one(), &store.mats[handle.w], &cols, T::zero(), &mut out2);
    let bias = &store.vecs[handle.b];
    for (mut row, &b) in out2.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    out2.into_shape_with_order((handle.c_out, h, w)).unwrap()
}

/// Convolution backward. Accumulates dW and db into `grads` and returns the
/// gradient with respect to the input map.
pub fn conv_backward<T: Scalar>(
    store: &ParamStore<T>,
    handle: &ConvHandle,
    x: &Array3<T>,
    d_out: &Array3<T>,
    grads: &mut ParamStore<T>,
) -> Array3<T> {
    let (_, h, w) = x.dim();
    let dy2 = d_out
        .view()
        .into_shape_with_order((handle.c_out, h * w))
        .unwrap();
    // Bias gradient: row sums.
    {
        let gb = &mut grads.vecs[handle.b];
        for (i, row) in dy2.rows().into_iter().enumerate() {
            gb[i] = gb[i] + row.sum();
        }
    }
    let cols = im2col(x);
    general_mat_mul(
        T::one(),
        &dy2,
        &cols.t(),
        T::one(),
        &mut grads.mats[handle.w],
    );
    let mut d_cols = Array2::zeros((handle.c_in * 9, h * w));
    general_mat_mul(
        T::one(),
        &store.mats[handle.w].t(),
        &dy2,
        T::zero(),
        &mut d_cols,
    );
    col2im(&d_cols, handle.c_in, h, w)
}

/// In-place ReLU.
pub fn relu_inplace<T: Scalar>(values: &mut [T]) {
    for v in values {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// ReLU backward given the forward *output*: passes gradient where the output
/// is positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut [T], output: &[T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with stride 2 (trailing odd row/column dropped). Returns
/// the pooled map and the within-window argmax (0..4) needed for backward.
pub fn maxpool2_forward<T: Scalar>(x: &Array3<T>) -> (Array3<T>, Array3<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut mask = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[[ci, oy * 2, ox * 2]];
                let mut arg = 0u8;
                for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[[ci, oy * 2 + dy, ox * 2 + dx]];
                    if v > best {
                        best = v;
                        arg = k as u8 + 1;
                    }
                }
                out[[ci, oy, ox]] = best;
                mask[[ci, oy, ox]] = arg;
            }
        }
    }
    (out, mask)
}

/// Max-pool backward: routes each output gradient to its argmax position.
pub fn maxpool2_backward<T: Scalar>(
    d_out: &Array3<T>,
    mask: &Array3<u8>,
    input_dim: (usize, usize, usize),
) -> Array3<T> {
    let (c, oh, ow) = d_out.dim();
    let mut dx = Array3::zeros(input_dim);
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (dy, dxo) = OFFSETS[mask[[ci, oy, ox]] as usize];
                dx[[ci, oy * 2 + dy, ox * 2 + dxo]] =
                    dx[[ci, oy * 2 + dy, ox * 2 + dxo]] + d_out[[ci, oy, ox]];
            }
        }
    }
    dx
}

/// Global average pooling `[C, H, W] -> [C]`.
pub fn global_avg_pool<T: Scalar>(x: &Array3<T>) -> Array1<T> {
    let (c, h, w) = x.dim();
    let scale = s::<T>(1.0 / (h * w) as f64);
    let mut out = Array1::zeros(c);
    for ci in 0..c {
        out[ci] = x.index_axis(ndarray::Axis(0), ci).sum() * scale;
    }
    out
}

/// Global-average-pool backward: spreads each channel gradient uniformly.
pub fn global_avg_pool_backward<T: Scalar>(
    d_out: &Array1<T>,
    input_dim: (usize, usize, usize),
) -> Array3<T> {
    let (c, h, w) = input_dim;
    let scale = s::<T>(1.0 / (h * w) as f64);
    let mut dx = Array3::zeros(input_dim);
    for ci in 0..c {
        dx.index_axis_mut(ndarray::Axis(0), ci).fill(d_out[ci] * scale);
    }
    dx
}

/// Dense forward: `y = W x + b`.
pub fn dense_forward<T: Scalar>(
    store: &ParamStore<T>,
    handle: &DenseHandle,
    x: &Array1<T>,
) -> Array1<T> {
    debug_assert_eq!(x.len(), handle.in_dim);
    store.mats[handle.w].dot(x) + &store.vecs[handle.b]
}

/// Dense backward. Accumulates dW (outer product) and db into `grads`,
/// returns dx.
pub fn dense_backward<T: Scalar>(
    store: &ParamStore<T>,
    handle: &DenseHandle,
    x: &Array1<T>,
    d_out: &Array1<T>,
    grads: &mut ParamStore<T>,
) -> Array1<T> {
    {
        let gw = &mut grads.mats[handle.w];
        for (mut row, &dy) in gw.rows_mut().into_iter().zip(d_out.iter()) {
            if dy != T::zero() {
                row.scaled_add(dy, x);
            }
        }
        grads.vecs[handle.b] += d_out;
    }
    store.mats[handle.w].t().dot(d_out)
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &Array1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Softmax backward: given the forward output `p` and the gradient with
/// respect to the probabilities, returns the gradient with respect to logits:
/// `p * (d - <p, d>)`.
pub fn softmax_backward<T: Scalar>(p: &Array1<T>, d_probs: &Array1<T>) -> Array1<T> {
    let dot = p.dot(d_probs);
    let mut out = Array1::zeros(p.len());
    for i in 0..p.len() {
        out[i] = p[i] * (d_probs[i] - dot);
    }
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
/// With `p == 0` the mask is all ones, so the backward path is uniform.
pub fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Array1<T> {
    if p <= 0.0 {
        return Array1::from_elem(len, T::one());
    }
    let keep = s::<T>(1.0 / (1.0 - p));
    Array1::from_shape_fn(len, |_| {
        if rng.random_range(0.0..1.0) < p {
            T::zero()
        } else {
            keep
        }
    })
}
