//! Prepared per-scheme inference.

use std::time::{Duration, Instant};

use super::{decode_f16, QuantParams, QuantScheme};
use crate::error::{Error, Result};
use crate::net::exec::{argmax, forward_observed, Mode, Params, Plan};
use crate::net::{LayerSpec, ModelGraph, ParamData, ParamTensor, QuantMode, BN_EPSILON};
use crate::tensor::{
    batchnorm_infer_inplace, conv2d_accumulate, dense_accumulate, maxpool2d_into, softmax_slice, ConvGeometry, Tensor,
};

/// Result of one frame through an [`Engine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Tensor<f32>,
    /// Pre-softmax values (dequantized for the uint8 path).
    pub logits: Vec<f32>,
    /// Wall time of the numeric path, from pixels to probabilities.
    pub elapsed: Duration,
}

impl Inference {
    pub fn predicted(&self) -> usize {
        argmax(self.probs.data())
    }
}

/// A model decoded once into the form its scheme executes in.
#[derive(Debug, Clone)]
pub struct Engine {
    mode: QuantMode,
    input_shape: [usize; 3],
    exec: Exec,
}

#[derive(Debug, Clone)]
enum Exec {
    Float { plan: Plan, params: Params<f32> },
    Dynamic(Vec<DynLayer>),
    Uint8(Vec<U8Layer>),
}

#[derive(Debug, Clone)]
enum DynLayer {
    Conv {
        geom: ConvGeometry,
        weights: Vec<i32>,
        scale: f32,
        bias: Vec<f32>,
    },
    Dense {
        weights: Vec<i32>,
        scale: f32,
        bias: Vec<f32>,
    },
    Norm {
        channels: usize,
        params: [Vec<f32>; 4],
    },
    Relu,
    Pool([usize; 3]),
    Flatten,
    Softmax,
}

/// Fixed-point multiplier `mantissa * 2^-shift`, mantissa in [2^30, 2^31).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Multiplier {
    mantissa: i64,
    shift: i32,
}

impl Multiplier {
    pub(crate) fn new(real: f64) -> Self {
        assert!(real > 0.0 && real.is_finite(), "multiplier must be positive");
        let mut f = real;
        let mut e = 0i32;
        while f >= 1.0 {
            f /= 2.0;
            e += 1;
        }
        while f < 0.5 {
            f *= 2.0;
            e -= 1;
        }
        let mut mantissa = (f * (1u64 << 31) as f64).round() as i64;
        if mantissa == 1 << 31 {
            mantissa /= 2;
            e += 1;
        }
        Multiplier {
            mantissa,
            shift: 31 - e,
        }
    }

    /// `round(acc * real)`, half away from zero.
    pub(crate) fn apply(self, acc: i32) -> i64 {
        let p = acc as i128 * self.mantissa as i128;
        if self.shift <= 0 {
            return (p << (-self.shift).min(64)) as i64;
        }
        if self.shift > 126 {
            return 0;
        }
        let half = 1i128 << (self.shift - 1);
        let mag = (p.abs() + half) >> self.shift;
        (if p < 0 { -mag } else { mag }) as i64
    }
}

#[derive(Debug, Clone)]
enum U8Layer {
    Conv {
        geom: ConvGeometry,
        weights: Vec<i32>,
        bias: Vec<i32>,
        input_zp: i32,
        multiplier: Multiplier,
        output_zp: i32,
    },
    Dense {
        weights: Vec<i32>,
        bias: Vec<i32>,
        input_zp: i32,
        multiplier: Multiplier,
        output_zp: i32,
    },
    Relu(u8),
    Pool([usize; 3]),
    Identity,
    Softmax(QuantParams),
}

fn mismatch(model: &ModelGraph, layer: usize, p: &ParamTensor) -> Error {
    Error::Quant(format!(
        "layer {layer}: {:?} record in a {} model",
        p.dtype(),
        model.quant.name()
    ))
}

fn geometry(spec: &LayerSpec, shape: &[usize]) -> Result<ConvGeometry> {
    match *spec {
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride,
            padding,
        } => ConvGeometry::new(shape[0], shape[1], in_channels, kernel_h, kernel_w, out_channels, stride, padding),
        _ => unreachable!("geometry of a non-conv layer"),
    }
}

impl Engine {
    /// Validates `model` and decodes it for execution. binary16 parameters
    /// are widened to f32 here, so the f16 model runs the f32 code path.
    pub fn prepare(model: &ModelGraph) -> Result<Self> {
        model.validate()?;
        let exec = match model.quant {
            QuantMode::F32 | QuantMode::F16 => {
                let params = model
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        l.params
                            .iter()
                            .map(|p| match &p.data {
                                ParamData::F32(v) if model.quant == QuantMode::F32 => Ok(v.clone()),
                                ParamData::F16(v) if model.quant == QuantMode::F16 => {
                                    Ok(v.iter().map(|&b| decode_f16(b)).collect())
                                }
                                _ => Err(mismatch(model, i, p)),
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Params<f32>>>()?;
                Exec::Float {
                    plan: Plan::new(model)?,
                    params,
                }
            }
            QuantMode::DynamicI8 => Exec::Dynamic(Self::prepare_dynamic(model)?),
            QuantMode::Uint8Affine => Exec::Uint8(Self::prepare_uint8(model)?),
        };
        Ok(Engine {
            mode: model.quant,
            input_shape: model.input_shape,
            exec,
        })
    }

    fn prepare_dynamic(model: &ModelGraph) -> Result<Vec<DynLayer>> {
        let mut shape = model.input_shape.to_vec();
        let mut out = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let p = &layer.params;
            let i8_weights = |r: &ParamTensor| match &r.data {
                ParamData::I8(w) => Ok((w.iter().map(|&v| v as i32).collect::<Vec<_>>(), r.scale)),
                _ => Err(mismatch(model, i, r)),
            };
            out.push(match layer.spec {
                LayerSpec::Conv2d { .. } => {
                    let (weights, scale) = i8_weights(&p[0])?;
                    DynLayer::Conv {
                        geom: geometry(&layer.spec, &shape)?,
                        weights,
                        scale,
                        bias: p[1].as_f32()?.to_vec(),
                    }
                }
                LayerSpec::Dense { .. } => {
                    let (weights, scale) = i8_weights(&p[0])?;
                    DynLayer::Dense {
                        weights,
                        scale,
                        bias: p[1].as_f32()?.to_vec(),
                    }
                }
                LayerSpec::BatchNorm { channels } => DynLayer::Norm {
                    channels,
                    params: [
                        p[0].as_f32()?.to_vec(),
                        p[1].as_f32()?.to_vec(),
                        p[2].as_f32()?.to_vec(),
                        p[3].as_f32()?.to_vec(),
                    ],
                },
                LayerSpec::Relu => DynLayer::Relu,
                LayerSpec::MaxPool { .. } => DynLayer::Pool([shape[0], shape[1], shape[2]]),
                LayerSpec::Flatten => DynLayer::Flatten,
                LayerSpec::Softmax => DynLayer::Softmax,
            });
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(out)
    }

    fn prepare_uint8(model: &ModelGraph) -> Result<Vec<U8Layer>> {
        let mut shape = model.input_shape.to_vec();
        // raw pixels: scale 1/255, zero point 0
        let (mut in_scale, mut in_zp) = (1.0f32 / 255.0, 0i32);
        let mut out = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let p = &layer.params;
            out.push(match layer.spec {
                LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                    let ParamData::U8(w) = &p[0].data else {
                        return Err(mismatch(model, i, &p[0]));
                    };
                    let ParamData::I32(bias) = &p[1].data else {
                        return Err(mismatch(model, i, &p[1]));
                    };
                    let zw = p[0].zero_point;
                    let weights: Vec<i32> = w.iter().map(|&v| v as i32 - zw).collect();
                    let (out_scale, out_zp) = (p[2].scale, p[2].zero_point);
                    let multiplier =
                        Multiplier::new(p[0].scale as f64 * in_scale as f64 / out_scale as f64);
                    let l = if let LayerSpec::Conv2d { .. } = layer.spec {
                        U8Layer::Conv {
                            geom: geometry(&layer.spec, &shape)?,
                            weights,
                            bias: bias.clone(),
                            input_zp: in_zp,
                            multiplier,
                            output_zp: out_zp,
                        }
                    } else {
                        U8Layer::Dense {
                            weights,
                            bias: bias.clone(),
                            input_zp: in_zp,
                            multiplier,
                            output_zp: out_zp,
                        }
                    };
                    (in_scale, in_zp) = (out_scale, out_zp);
                    l
                }
                LayerSpec::Relu => U8Layer::Relu(in_zp as u8),
                LayerSpec::MaxPool { .. } => U8Layer::Pool([shape[0], shape[1], shape[2]]),
                LayerSpec::BatchNorm { .. } | LayerSpec::Flatten => U8Layer::Identity,
                LayerSpec::Softmax => U8Layer::Softmax(QuantParams {
                    scale: in_scale,
                    zero_point: in_zp,
                    scheme: QuantScheme::Uint8Affine,
                }),
            });
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(out)
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Runs one frame; the frame tensor must have the model's input shape.
    pub fn run(&self, frame: &Tensor<u8>) -> Result<Inference> {
        if frame.shape() != self.input_shape {
            return Err(Error::shape(format!(
                "model expects a {:?} frame, got {:?}",
                self.input_shape,
                frame.shape()
            )));
        }
        self.run_pixels(frame.data())
    }

    /// Runs one frame given as row-major pixels.
    pub fn run_pixels(&self, pixels: &[u8]) -> Result<Inference> {
        if pixels.len() != self.input_len() {
            return Err(Error::shape(format!(
                "model expects {} pixels, got {}",
                self.input_len(),
                pixels.len()
            )));
        }
        let start = Instant::now();
        let (logits, probs) = match &self.exec {
            Exec::Float { plan, params } => {
                let input = pixels.iter().map(|&v| v as f32 / 255.0).collect();
                let logits_at = params.len() - 2;
                let mut logits = Vec::new();
                let trace = forward_observed(plan, params, input, 1, Mode::Infer, &mut |i, out| {
                    if i == logits_at {
                        logits = out.to_vec();
                    }
                })?;
                (logits, trace.probs)
            }
            Exec::Dynamic(layers) => run_dynamic(layers, pixels)?,
            Exec::Uint8(layers) => run_uint8(layers, pixels)?,
        };
        let elapsed = start.elapsed();
        let n = probs.len();
        Ok(Inference {
            probs: Tensor::new(vec![n], probs)?,
            logits,
            elapsed,
        })
    }

    pub fn forward(&self, frame: &Tensor<u8>) -> Result<Tensor<f32>> {
        Ok(self.run(frame)?.probs)
    }
}

/// Symmetric int8 quantization of an activation vector, scale from its
/// largest magnitude.
fn quantize_activations(x: &[f32]) -> (Vec<i32>, f32) {
    let qp = QuantParams::symmetric_i8(x.iter().fold(0f32, |m, v| m.max(v.abs())));
    (x.iter().map(|&v| qp.quantize(v)).collect(), qp.scale)
}

fn run_dynamic(layers: &[DynLayer], pixels: &[u8]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut x: Vec<f32> = pixels.iter().map(|&v| v as f32 / 255.0).collect();
    let mut logits = Vec::new();
    for layer in layers {
        x = match layer {
            DynLayer::Conv {
                geom,
                weights,
                scale,
                bias,
            } => {
                let (qa, sa) = quantize_activations(&x);
                let mut acc = vec![0i32; geom.output_len()];
                conv2d_accumulate(&qa, weights, geom, &mut acc);
                let s = scale * sa;
                let c = bias.len();
                acc.iter().enumerate().map(|(k, &a)| a as f32 * s + bias[k % c]).collect()
            }
            DynLayer::Dense { weights, scale, bias } => {
                let (qa, sa) = quantize_activations(&x);
                let mut acc = vec![0i32; bias.len()];
                dense_accumulate(&qa, weights, bias.len(), &mut acc);
                let s = scale * sa;
                let y: Vec<f32> = acc.iter().zip(bias).map(|(&a, &b)| a as f32 * s + b).collect();
                logits = y.clone();
                y
            }
            DynLayer::Norm { channels, params } => {
                let [g, b, m, v] = params;
                batchnorm_infer_inplace(&mut x, *channels, g, b, m, v, BN_EPSILON);
                x
            }
            DynLayer::Relu => x.into_iter().map(|v| v.max(0.0)).collect(),
            DynLayer::Pool([h, w, c]) => {
                let mut y = vec![0f32; (h / 2) * (w / 2) * c];
                maxpool2d_into(&x, *h, *w, *c, &mut y, None);
                y
            }
            DynLayer::Flatten => x,
            DynLayer::Softmax => {
                let mut y = vec![0f32; x.len()];
                softmax_slice(&x, &mut y)?;
                y
            }
        };
    }
    Ok((logits, x))
}

fn requantize(acc: i32, m: Multiplier, zp: i32) -> u8 {
    (m.apply(acc) + zp as i64).clamp(0, 255) as u8
}

fn run_uint8(layers: &[U8Layer], pixels: &[u8]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut x = pixels.to_vec();
    let mut logits = Vec::new();
    let mut probs = Vec::new();
    for layer in layers {
        x = match layer {
            U8Layer::Conv {
                geom,
                weights,
                bias,
                input_zp,
                multiplier,
                output_zp,
            } => {
                let xi: Vec<i32> = x.iter().map(|&v| v as i32 - input_zp).collect();
                let mut acc = vec![0i32; geom.output_len()];
                conv2d_accumulate(&xi, weights, geom, &mut acc);
                let c = bias.len();
                acc.iter()
                    .enumerate()
                    .map(|(k, &a)| requantize(a.saturating_add(bias[k % c]), *multiplier, *output_zp))
                    .collect()
            }
            U8Layer::Dense {
                weights,
                bias,
                input_zp,
                multiplier,
                output_zp,
            } => {
                let xi: Vec<i32> = x.iter().map(|&v| v as i32 - input_zp).collect();
                let mut acc = vec![0i32; bias.len()];
                dense_accumulate(&xi, weights, bias.len(), &mut acc);
                acc.iter()
                    .zip(bias)
                    .map(|(&a, &b)| requantize(a.saturating_add(b), *multiplier, *output_zp))
                    .collect()
            }
            U8Layer::Relu(zp) => x.into_iter().map(|v| v.max(*zp)).collect(),
            U8Layer::Pool([h, w, c]) => {
                let mut y = vec![0u8; (h / 2) * (w / 2) * c];
                maxpool2d_into(&x, *h, *w, *c, &mut y, None);
                y
            }
            U8Layer::Identity => x,
            U8Layer::Softmax(qp) => {
                logits = x.iter().map(|&q| qp.dequantize(q as i32)).collect();
                probs = vec![0f32; logits.len()];
                softmax_slice(&logits, &mut probs)?;
                x
            }
        };
    }
    Ok((logits, probs))
}

/// One-shot inference for any scheme; see [`Engine`] to amortize the
/// decoding over many frames. `elapsed` covers the numeric path only.
pub fn quantized_forward(model: &ModelGraph, frame: &Tensor<u8>) -> Result<Inference> {
    Engine::prepare(model)?.run(frame)
}
