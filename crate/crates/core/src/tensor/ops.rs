//! Forward kernels.
//!
//! Every reduction runs in a fixed order: convolution sums kernel row-major
//! (ky, kx, then input channel innermost) and adds the bias last; dense sums
//! over inputs in ascending order. Results are therefore bit-identical to a
//! naive nested-loop implementation with the same order.

use std::ops::{AddAssign, Mul};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding so that output = ceil(input / stride); odd padding puts
    /// the extra row/column at the bottom/right.
    Same,
    Valid,
}

/// Resolved geometry of a 2-D convolution over an HWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_h: usize,
        in_w: usize,
        in_c: usize,
        k_h: usize,
        k_w: usize,
        out_c: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (out_h, out_w, pad_top, pad_left) =
            conv2d_output_dims(in_h, in_w, k_h, k_w, stride, padding)?;
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    pub fn kernel_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c * self.out_c
    }

    /// Input coordinate for an output coordinate and kernel tap, or `None`
    /// when the tap lands in the zero padding.
    #[inline]
    pub(crate) fn source(&self, out: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = out * self.stride + tap;
        if pos < pad || pos - pad >= extent {
            None
        } else {
            Some(pos - pad)
        }
    }
}

/// Output height, width, top padding and left padding of a convolution.
pub fn conv2d_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if kh == 0 || kw == 0 || h == 0 || w == 0 {
        return Err(Error::shape("convolution dimensions must be positive"));
    }
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape(format!(
                    "kernel {kh}x{kw} larger than input {h}x{w}"
                )));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            if kh > h + pad_h || kw > w + pad_w {
                return Err(Error::shape("kernel larger than padded input"));
            }
            Ok((oh, ow, pad_h / 2, pad_w / 2))
        }
    }
}

/// Raw convolution sums (no bias) into `out`, for any ring-like element
/// type. Shared by the float path and the integer quantized paths.
pub(crate) fn conv2d_accumulate<T>(input: &[T], kernels: &[T], g: &ConvGeometry, out: &mut [T])
where
    T: Copy + Default + AddAssign + Mul<Output = T>,
{
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(kernels.len(), g.kernel_len());
    debug_assert_eq!(out.len(), g.output_len());
    let cout = g.out_c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let acc = &mut out[(oy * g.out_w + ox) * cout..][..cout];
            acc.fill(T::default());
            for ky in 0..g.k_h {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k_w {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                        continue;
                    };
                    let px = &input[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                    let taps = &kernels[(ky * g.k_w + kx) * g.in_c * cout..][..g.in_c * cout];
                    for (ci, &x) in px.iter().enumerate() {
                        let wrow = &taps[ci * cout..][..cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += x * wv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_into<T: Real>(
    input: &[T],
    kernels: &[T],
    bias: &[T],
    g: &ConvGeometry,
    out: &mut [T],
) {
    conv2d_accumulate(input, kernels, g, out);
    for px in out.chunks_exact_mut(g.out_c) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), kernels.shape(), padding, stride)?;
    if bias.shape() != [g.out_c] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            g.out_c
        )));
    }
    let mut out = vec![T::zero(); g.output_len()];
    conv2d_into(input.data(), kernels.data(), bias.data(), &g, &mut out);
    Tensor::new(vec![g.out_h, g.out_w, g.out_c], out)
}

pub(crate) fn conv_geometry(
    input: &[usize],
    kernels: &[usize],
    padding: Padding,
    stride: usize,
) -> Result<ConvGeometry> {
    let &[h, w, cin] = input else {
        return Err(Error::shape(format!("conv2d input must be [H,W,C], got {input:?}")));
    };
    let &[kh, kw, kcin, cout] = kernels else {
        return Err(Error::shape(format!(
            "conv2d kernels must be [kh,kw,Cin,Cout], got {kernels:?}"
        )));
    };
    if kcin != cin {
        return Err(Error::shape(format!(
            "input has {cin} channels but kernels expect {kcin}"
        )));
    }
    ConvGeometry::new(h, w, cin, kh, kw, cout, stride, padding)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input offset of the selected element for every output element.
    pub argmax: Vec<u32>,
}

/// 2x2 / stride-2 max pooling over an HWC slice. Ties keep the first element
/// in row-major window order.
pub(crate) fn maxpool2d_into<T: PartialOrd + Copy>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    out: &mut [T],
    mut argmax: Option<&mut [u32]>,
) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_off = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = input[best_off];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let off = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if input[off] > best {
                        best = input[off];
                        best_off = off;
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                if let Some(am) = argmax.as_deref_mut() {
                    am[o] = best_off as u32;
                }
            }
        }
    }
}

pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<MaxPoolOutput<T>> {
    let &[h, w, c] = input.shape() else {
        return Err(Error::shape(format!("maxpool input must be [H,W,C], got {:?}", input.shape())));
    };
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("maxpool needs H,W >= 2, got {h}x{w}")));
    }
    let n = (h / 2) * (w / 2) * c;
    let mut out = vec![T::zero(); n];
    let mut argmax = vec![0u32; n];
    maxpool2d_into(input.data(), h, w, c, &mut out, Some(&mut argmax));
    Ok(MaxPoolOutput {
        output: Tensor::new(vec![h / 2, w / 2, c], out)?,
        argmax,
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|&v| if v > T::zero() { v } else { T::zero() })
}

pub fn flatten<T: Clone>(input: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: vec![input.len()],
        data: input.data().to_vec(),
    }
}

/// Raw dense sums (no bias), inputs in ascending order.
pub(crate) fn dense_accumulate<T>(x: &[T], weights: &[T], outputs: usize, out: &mut [T])
where
    T: Copy + Default + AddAssign + Mul<Output = T>,
{
    out.fill(T::default());
    for (i, &xi) in x.iter().enumerate() {
        let row = &weights[i * outputs..][..outputs];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

pub(crate) fn dense_into<T: Real>(x: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    dense_accumulate(x, weights, bias.len(), out);
    for (o, &b) in out.iter_mut().zip(bias) {
        *o = *o + b;
    }
}

pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n] = input.shape() else {
        return Err(Error::shape(format!("dense input must be rank 1, got {:?}", input.shape())));
    };
    let &[wn, m] = weights.shape() else {
        return Err(Error::shape(format!("dense weights must be [N,M], got {:?}", weights.shape())));
    };
    if wn != n || bias.shape() != [m] {
        return Err(Error::shape(format!(
            "dense shapes disagree: input [{n}], weights [{wn},{m}], bias {:?}",
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); m];
    dense_into(input.data(), weights.data(), bias.data(), &mut out);
    Tensor::new(vec![m], out)
}

pub(crate) fn softmax_slice<T: Real>(logits: &[T], out: &mut [T]) -> Result<()> {
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("softmax input not finite: {bad:?}")));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    Ok(())
}

pub fn softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 1 {
        return Err(Error::shape(format!("softmax input must be rank 1, got {:?}", input.shape())));
    }
    let mut out = vec![T::zero(); input.len()];
    softmax_slice(input.data(), &mut out)?;
    Tensor::new(input.shape().to_vec(), out)
}

/// Per-channel values retained by the training-mode normalization for the
/// backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormTrainOutput<T> {
    pub output: Tensor<T>,
    pub cache: BatchNormCache<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

fn check_norm_args<T: Real>(input: &Tensor<T>, params: [&[T]; 4], epsilon: T) -> Result<usize> {
    if !(epsilon > T::zero()) {
        return Err(Error::invalid(format!("batchnorm epsilon must be positive, got {epsilon:?}")));
    }
    let c = *input.shape().last().expect("tensors have rank >= 1");
    if params.iter().any(|p| p.len() != c) {
        return Err(Error::shape(format!(
            "batchnorm parameters must have {c} channels"
        )));
    }
    Ok(c)
}

/// Inference-mode normalization with running statistics over the trailing
/// channel axis.
pub fn batchnorm_infer<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
) -> Result<Tensor<T>> {
    let c = check_norm_args(input, [gamma, beta, running_mean, running_var], epsilon)?;
    let mut out = input.data().to_vec();
    batchnorm_infer_inplace(&mut out, c, gamma, beta, running_mean, running_var, epsilon);
    Tensor::new(input.shape().to_vec(), out)
}

pub(crate) fn batchnorm_infer_inplace<T: Real>(
    data: &mut [T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    epsilon: T,
) {
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma[ch] / (var[ch] + epsilon).sqrt())
        .collect();
    for px in data.chunks_exact_mut(c) {
        for ch in 0..c {
            px[ch] = (px[ch] - mean[ch]) * scale[ch] + beta[ch];
        }
    }
}

/// Training-mode normalization: normalizes with the batch's biased
/// per-channel statistics and returns running statistics updated as
/// `momentum * running + (1 - momentum) * batch`.
pub fn batchnorm_train<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
    momentum: T,
) -> Result<BatchNormTrainOutput<T>> {
    let c = check_norm_args(input, [gamma, beta, running_mean, running_var], epsilon)?;
    if !(momentum >= T::zero() && momentum <= T::one()) {
        return Err(Error::invalid("batchnorm momentum must lie in [0, 1]"));
    }
    let data = input.data();
    let rows = data.len() / c;
    let count = T::lit(rows as f64);

    let mut mean = vec![T::zero(); c];
    for px in data.chunks_exact(c) {
        for ch in 0..c {
            mean[ch] = mean[ch] + px[ch];
        }
    }
    for m in mean.iter_mut() {
        *m = *m / count;
    }
    let mut var = vec![T::zero(); c];
    for px in data.chunks_exact(c) {
        for ch in 0..c {
            let d = px[ch] - mean[ch];
            var[ch] = var[ch] + d * d;
        }
    }
    for v in var.iter_mut() {
        *v = *v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();

    let mut normalized = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for ((px, nx), ox) in data
        .chunks_exact(c)
        .zip(normalized.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for ch in 0..c {
            nx[ch] = (px[ch] - mean[ch]) * inv_std[ch];
            ox[ch] = gamma[ch] * nx[ch] + beta[ch];
        }
    }

    let keep = T::one() - momentum;
    let running_mean = running_mean
        .iter()
        .zip(&mean)
        .map(|(&r, &b)| momentum * r + keep * b)
        .collect();
    let running_var = running_var
        .iter()
        .zip(&var)
        .map(|(&r, &b)| momentum * r + keep * b)
        .collect();

    Ok(BatchNormTrainOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        cache: BatchNormCache {
            normalized,
            inv_std,
            channels: c,
        },
        running_mean,
        running_var,
    })
}
