//! Batched forward and backward passes over a layer list, generic over the
//! compute type so the same code trains in f32 and is checked in f64.

use super::model::{LayerSpec, ModelGraph, QuantMode, BN_EPSILON, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_backward_into, batchnorm_infer_inplace, batchnorm_train, conv2d_backward_into,
    conv2d_into, dense_backward_into, dense_into, maxpool2d_backward_into, maxpool2d_into,
    softmax_crossentropy_grad, softmax_slice, BatchNormCache, ConvGeometry, Real, Tensor,
};

/// Parameter values indexed as `[layer][record][element]`.
pub type Params<T> = Vec<Vec<Vec<T>>>;

pub fn params_from_model(model: &ModelGraph) -> Result<Params<f32>> {
    if model.quant != QuantMode::F32 {
        return Err(Error::Quant(format!(
            "expected an f32 model, found {}",
            model.quant.name()
        )));
    }
    model
        .layers
        .iter()
        .map(|l| l.params.iter().map(|p| p.as_f32().map(<[f32]>::to_vec)).collect())
        .collect()
}

pub fn cast_params<T: Real, U: Real>(params: &Params<T>) -> Params<U> {
    params
        .iter()
        .map(|l| {
            l.iter()
                .map(|p| p.iter().map(|v| U::from(*v).expect("finite cast")).collect())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Layer list with resolved shapes.
#[derive(Debug, Clone)]
pub struct Plan {
    specs: Vec<LayerSpec>,
    in_shapes: Vec<Vec<usize>>,
    geoms: Vec<Option<ConvGeometry>>,
    classes: usize,
}

impl Plan {
    pub fn new(model: &ModelGraph) -> Result<Self> {
        let specs: Vec<LayerSpec> = model.layers.iter().map(|l| l.spec).collect();
        Self::from_specs(model.input_shape.to_vec(), specs)
    }

    pub fn from_specs(input_shape: Vec<usize>, specs: Vec<LayerSpec>) -> Result<Self> {
        if specs.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::shape("network must end in softmax"));
        }
        let mut shape = input_shape;
        let mut in_shapes = Vec::with_capacity(specs.len());
        let mut geoms = Vec::with_capacity(specs.len());
        for spec in &specs {
            geoms.push(match *spec {
                LayerSpec::Conv2d {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                } => Some(ConvGeometry::new(
                    shape[0],
                    shape[1],
                    in_channels,
                    kernel_h,
                    kernel_w,
                    out_channels,
                    stride,
                    padding,
                )?),
                _ => None,
            });
            let next = spec.output_shape(&shape)?;
            in_shapes.push(std::mem::replace(&mut shape, next));
        }
        let classes = shape[0];
        Ok(Plan {
            specs,
            in_shapes,
            geoms,
            classes,
        })
    }

    pub fn input_len(&self) -> usize {
        self.in_shapes[0].iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn in_len(&self, i: usize) -> usize {
        self.in_shapes[i].iter().product()
    }

    fn out_len(&self, i: usize) -> usize {
        self.in_shapes
            .get(i + 1)
            .map(|s| s.iter().product())
            .unwrap_or(self.classes)
    }
}

/// Values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub batch: usize,
    /// Input of each layer that needs it for the backward pass.
    inputs: Vec<Option<Vec<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    norm: Vec<Option<BatchNormCache<T>>>,
    /// Softmax output, `batch x classes`.
    pub probs: Vec<T>,
    /// Updated running statistics per normalization layer.
    pub running: Vec<Option<(Vec<T>, Vec<T>)>>,
}

pub fn forward<T: Real>(
    plan: &Plan,
    params: &Params<T>,
    input: Vec<T>,
    batch: usize,
    mode: Mode,
) -> Result<Trace<T>> {
    forward_observed(plan, params, input, batch, mode, &mut |_, _| {})
}

/// [`forward`] that hands the whole-batch output of every layer to `observe`.
pub fn forward_observed<T: Real>(
    plan: &Plan,
    params: &Params<T>,
    input: Vec<T>,
    batch: usize,
    mode: Mode,
    observe: &mut dyn FnMut(usize, &[T]),
) -> Result<Trace<T>> {
    if input.len() != batch * plan.input_len() {
        return Err(Error::shape(format!(
            "batch of {batch} needs {} input values, got {}",
            batch * plan.input_len(),
            input.len()
        )));
    }
    let keep = mode == Mode::Train;
    let n_layers = plan.specs.len();
    let mut trace = Trace {
        batch,
        inputs: vec![None; n_layers],
        argmax: vec![None; n_layers],
        norm: vec![None; n_layers],
        probs: Vec::new(),
        running: vec![None; n_layers],
    };
    let mut x = input;
    for (i, spec) in plan.specs.iter().enumerate() {
        let (in_len, out_len) = (plan.in_len(i), plan.out_len(i));
        let p = &params[i];
        let y = match *spec {
            LayerSpec::Conv2d { .. } => {
                let g = plan.geoms[i].as_ref().expect("conv geometry");
                let mut y = vec![T::zero(); batch * out_len];
                for (xs, ys) in x.chunks_exact(in_len).zip(y.chunks_exact_mut(out_len)) {
                    conv2d_into(xs, &p[0], &p[1], g, ys);
                }
                if keep {
                    trace.inputs[i] = Some(x);
                }
                y
            }
            LayerSpec::BatchNorm { channels } => match mode {
                Mode::Train => {
                    let t = Tensor::new(vec![x.len() / channels, channels], x)?;
                    let eps = T::lit(BN_EPSILON as f64);
                    let out = batchnorm_train(&t, &p[0], &p[1], &p[2], &p[3], eps, T::lit(BN_MOMENTUM as f64))?;
                    trace.norm[i] = Some(out.cache);
                    trace.running[i] = Some((out.running_mean, out.running_var));
                    out.output.into_data()
                }
                Mode::Infer => {
                    let eps = T::lit(BN_EPSILON as f64);
                    batchnorm_infer_inplace(&mut x, channels, &p[0], &p[1], &p[2], &p[3], eps);
                    x
                }
            },
            LayerSpec::Relu => {
                let y = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                if keep {
                    trace.inputs[i] = Some(x);
                }
                y
            }
            LayerSpec::MaxPool { .. } => {
                let [h, w, c] = plan.in_shapes[i][..] else {
                    unreachable!("validated pool input");
                };
                let mut y = vec![T::zero(); batch * out_len];
                let mut am = if keep { vec![0u32; batch * out_len] } else { Vec::new() };
                for (s, (xs, ys)) in x.chunks_exact(in_len).zip(y.chunks_exact_mut(out_len)).enumerate() {
                    let slot = keep.then(|| &mut am[s * out_len..(s + 1) * out_len]);
                    maxpool2d_into(xs, h, w, c, ys, slot);
                }
                if keep {
                    trace.argmax[i] = Some(am);
                }
                y
            }
            LayerSpec::Flatten => x,
            LayerSpec::Dense { .. } => {
                let mut y = vec![T::zero(); batch * out_len];
                for (xs, ys) in x.chunks_exact(in_len).zip(y.chunks_exact_mut(out_len)) {
                    dense_into(xs, &p[0], &p[1], ys);
                }
                if keep {
                    trace.inputs[i] = Some(x);
                }
                y
            }
            LayerSpec::Softmax => {
                let mut y = vec![T::zero(); x.len()];
                for (xs, ys) in x.chunks_exact(in_len).zip(y.chunks_exact_mut(in_len)) {
                    softmax_slice(xs, ys)?;
                }
                y
            }
        };
        observe(i, &y);
        x = y;
    }
    trace.probs = x;
    Ok(trace)
}

/// Mean categorical cross-entropy of a batch of probabilities.
pub fn cross_entropy<T: Real>(probs: &[T], labels: &[usize], classes: usize) -> T {
    let tiny = T::min_positive_value();
    let total: T = probs
        .chunks_exact(classes)
        .zip(labels)
        .map(|(p, &l)| -(p[l].max(tiny)).ln())
        .sum();
    total / T::lit(labels.len() as f64)
}

/// Gradients of the mean cross-entropy for every parameter record
/// (running statistics get zeros).
pub fn backward<T: Real>(
    plan: &Plan,
    params: &Params<T>,
    trace: &Trace<T>,
    labels: &[usize],
) -> Result<Params<T>> {
    let batch = trace.batch;
    let probs = Tensor::new(vec![batch, plan.classes], trace.probs.clone())?;
    let mut g = softmax_crossentropy_grad(&probs, labels)?.into_data();

    let mut grads: Params<T> = params
        .iter()
        .map(|l| l.iter().map(|p| vec![T::zero(); p.len()]).collect())
        .collect();
    let missing = |i: usize, what: &str| Error::MissingCache(format!("layer {i}: {what}"));

    for i in (0..plan.specs.len()).rev() {
        let (in_len, out_len) = (plan.in_len(i), plan.out_len(i));
        let need_input_grad = i > 0;
        match plan.specs[i] {
            // fused with the cross-entropy gradient above
            LayerSpec::Softmax | LayerSpec::Flatten => {}
            LayerSpec::Dense { .. } => {
                let x = trace.inputs[i].as_ref().ok_or_else(|| missing(i, "dense input"))?;
                let mut gin = vec![T::zero(); batch * in_len];
                let (gw, gb) = split_pair(&mut grads[i]);
                for s in 0..batch {
                    let gi = need_input_grad.then(|| &mut gin[s * in_len..(s + 1) * in_len]);
                    dense_backward_into(
                        &x[s * in_len..(s + 1) * in_len],
                        &params[i][0],
                        &g[s * out_len..(s + 1) * out_len],
                        gi,
                        gw,
                        gb,
                    );
                }
                g = gin;
            }
            LayerSpec::Relu => {
                let x = trace.inputs[i].as_ref().ok_or_else(|| missing(i, "relu input"))?;
                for (d, &v) in g.iter_mut().zip(x) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            LayerSpec::MaxPool { .. } => {
                let am = trace.argmax[i].as_ref().ok_or_else(|| missing(i, "argmax"))?;
                let mut gin = vec![T::zero(); batch * in_len];
                for s in 0..batch {
                    maxpool2d_backward_into(
                        &am[s * out_len..(s + 1) * out_len],
                        &g[s * out_len..(s + 1) * out_len],
                        &mut gin[s * in_len..(s + 1) * in_len],
                    );
                }
                g = gin;
            }
            LayerSpec::BatchNorm { .. } => {
                let cache = trace.norm[i].as_ref().ok_or_else(|| missing(i, "batchnorm cache"))?;
                let mut gin = vec![T::zero(); g.len()];
                let (gg, gb) = split_pair(&mut grads[i]);
                batchnorm_backward_into(cache, &params[i][0], &g, &mut gin, gg, gb);
                g = gin;
            }
            LayerSpec::Conv2d { .. } => {
                let x = trace.inputs[i].as_ref().ok_or_else(|| missing(i, "conv input"))?;
                let geom = plan.geoms[i].as_ref().expect("conv geometry");
                let mut gin = if need_input_grad { vec![T::zero(); batch * in_len] } else { Vec::new() };
                let (gk, gb) = split_pair(&mut grads[i]);
                for s in 0..batch {
                    let gi = need_input_grad.then(|| &mut gin[s * in_len..(s + 1) * in_len]);
                    conv2d_backward_into(
                        &x[s * in_len..(s + 1) * in_len],
                        &params[i][0],
                        geom,
                        &g[s * out_len..(s + 1) * out_len],
                        gi,
                        gk,
                        gb,
                    );
                }
                g = gin;
            }
        }
    }
    Ok(grads)
}

fn split_pair<T>(records: &mut [Vec<T>]) -> (&mut [T], &mut [T]) {
    let (a, b) = records.split_at_mut(1);
    (&mut a[0], &mut b[0])
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
