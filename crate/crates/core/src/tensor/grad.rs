//! Backward kernels. Each takes the cached forward values plus the upstream
//! gradient and returns gradients for inputs and parameters.

use super::ops::{conv_geometry, BatchNormCache, ConvGeometry, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Accumulates kernel and bias gradients into `grad_k`/`grad_b` and, when
/// requested, writes the input gradient.
pub(crate) fn conv2d_backward_into<T: Real>(
    input: &[T],
    kernels: &[T],
    g: &ConvGeometry,
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    grad_k: &mut [T],
    grad_b: &mut [T],
) {
    let cout = g.out_c;
    if let Some(gi) = grad_in.as_deref_mut() {
        gi.fill(T::zero());
    }
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let go = &grad_out[(oy * g.out_w + ox) * cout..][..cout];
            for (b, &d) in grad_b.iter_mut().zip(go) {
                *b = *b + d;
            }
            for ky in 0..g.k_h {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k_w {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                        continue;
                    };
                    let in_off = (iy * g.in_w + ix) * g.in_c;
                    let k_off = (ky * g.k_w + kx) * g.in_c * cout;
                    for ci in 0..g.in_c {
                        let x = input[in_off + ci];
                        let row = k_off + ci * cout;
                        for (gk, &d) in grad_k[row..row + cout].iter_mut().zip(go) {
                            *gk = *gk + x * d;
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let mut s = T::zero();
                            for (&w, &d) in kernels[row..row + cout].iter().zip(go) {
                                s = s + w * d;
                            }
                            gi[in_off + ci] = gi[in_off + ci] + s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_grad<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    padding: Padding,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = conv_geometry(input.shape(), kernels.shape(), padding, stride)?;
    if grad_out.shape() != [g.out_h, g.out_w, g.out_c] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output [{}, {}, {}]",
            grad_out.shape(),
            g.out_h,
            g.out_w,
            g.out_c
        )));
    }
    let mut gi = vec![T::zero(); g.input_len()];
    let mut gk = vec![T::zero(); g.kernel_len()];
    let mut gb = vec![T::zero(); g.out_c];
    conv2d_backward_into(
        input.data(),
        kernels.data(),
        &g,
        grad_out.data(),
        Some(&mut gi),
        &mut gk,
        &mut gb,
    );
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), gi)?,
        kernels: Tensor::new(kernels.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![g.out_c], gb)?,
    })
}

pub(crate) fn maxpool2d_backward_into<T: Real>(argmax: &[u32], grad_out: &[T], grad_in: &mut [T]) {
    grad_in.fill(T::zero());
    for (&a, &d) in argmax.iter().zip(grad_out) {
        grad_in[a as usize] = grad_in[a as usize] + d;
    }
}

/// Routes each upstream gradient to the input element that won its window.
pub fn maxpool2d_grad<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.is_empty() {
        return Err(Error::MissingCache("maxpool argmax map is empty".into()));
    }
    if argmax.len() != grad_out.len() {
        return Err(Error::MissingCache(format!(
            "argmax map has {} entries, upstream gradient {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let n: usize = input_shape.iter().product();
    if argmax.iter().any(|&a| a as usize >= n) {
        return Err(Error::shape("argmax index outside the input"));
    }
    let mut gi = vec![T::zero(); n];
    maxpool2d_backward_into(argmax, grad_out.data(), &mut gi);
    Tensor::new(input_shape.to_vec(), gi)
}

pub(crate) fn batchnorm_backward_into<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &[T],
    grad_in: &mut [T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) {
    let c = cache.channels;
    let rows = grad_out.len() / c;
    let count = T::lit(rows as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (dy, xh) in grad_out.chunks_exact(c).zip(cache.normalized.chunks_exact(c)) {
        for ch in 0..c {
            sum_dy[ch] = sum_dy[ch] + dy[ch];
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[ch] * xh[ch];
        }
    }
    for ch in 0..c {
        grad_beta[ch] = grad_beta[ch] + sum_dy[ch];
        grad_gamma[ch] = grad_gamma[ch] + sum_dy_xhat[ch];
    }
    let coef: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch] / count).collect();
    for ((gi, dy), xh) in grad_in
        .chunks_exact_mut(c)
        .zip(grad_out.chunks_exact(c))
        .zip(cache.normalized.chunks_exact(c))
    {
        for ch in 0..c {
            gi[ch] = coef[ch] * (count * dy[ch] - sum_dy[ch] - xh[ch] * sum_dy_xhat[ch]);
        }
    }
}

/// Gradient of training-mode normalization (batch statistics).
pub fn batchnorm_grad<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if cache.normalized.is_empty() || cache.inv_std.is_empty() {
        return Err(Error::MissingCache("batchnorm cache is empty".into()));
    }
    let c = cache.channels;
    if cache.normalized.len() != grad_out.len()
        || cache.inv_std.len() != c
        || gamma.len() != c
        || grad_out.shape().last() != Some(&c)
    {
        return Err(Error::shape("batchnorm cache, gamma and gradient disagree"));
    }
    let mut gi = vec![T::zero(); grad_out.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    batchnorm_backward_into(cache, gamma, grad_out.data(), &mut gi, &mut gg, &mut gb);
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gi)?,
        gamma: gg,
        beta: gb,
    })
}

pub(crate) fn dense_backward_into<T: Real>(
    x: &[T],
    weights: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let m = grad_out.len();
    for (b, &d) in grad_b.iter_mut().zip(grad_out) {
        *b = *b + d;
    }
    for (i, &xi) in x.iter().enumerate() {
        for (gw, &d) in grad_w[i * m..(i + 1) * m].iter_mut().zip(grad_out) {
            *gw = *gw + xi * d;
        }
    }
    if let Some(gi) = grad_in {
        for (i, g) in gi.iter_mut().enumerate() {
            let mut s = T::zero();
            for (&w, &d) in weights[i * m..(i + 1) * m].iter().zip(grad_out) {
                s = s + w * d;
            }
            *g = s;
        }
    }
}

pub fn dense_grad<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (&[n], &[wn, m], &[gm]) = (input.shape(), weights.shape(), grad_out.shape()) else {
        return Err(Error::shape("dense_grad expects input [N], weights [N,M], gradient [M]"));
    };
    if n != wn || m != gm {
        return Err(Error::shape(format!(
            "dense_grad shapes disagree: input [{n}], weights [{wn},{m}], gradient [{gm}]"
        )));
    }
    let mut gi = vec![T::zero(); n];
    let mut gw = vec![T::zero(); n * m];
    let mut gb = vec![T::zero(); m];
    dense_backward_into(input.data(), weights.data(), grad_out.data(), Some(&mut gi), &mut gw, &mut gb);
    Ok(DenseGrads {
        input: Tensor::new(vec![n], gi)?,
        weights: Tensor::new(vec![n, m], gw)?,
        bias: Tensor::new(vec![m], gb)?,
    })
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_grad<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("relu_grad input and gradient shapes differ"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Fused softmax + mean categorical cross-entropy gradient w.r.t. logits:
/// `(probs - onehot) / batch`. `probs` is `[K]` (batch 1) or `[N, K]`.
pub fn softmax_crossentropy_grad<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, k) = match probs.shape() {
        &[k] => (1, k),
        &[n, k] => (n, k),
        other => return Err(Error::shape(format!("probabilities must be [K] or [N,K], got {other:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv = T::one() / T::lit(n as f64);
    let mut grad = probs.data().to_vec();
    for (row, &label) in grad.chunks_exact_mut(k).zip(labels) {
        if label >= k {
            return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
        }
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    Tensor::new(probs.shape().to_vec(), grad)
}
