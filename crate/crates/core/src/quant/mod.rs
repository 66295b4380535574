//! Post-training quantization: binary16 weight storage, dynamic-range int8
//! and full-integer uint8 affine, plus the inference engine for each.
//!
//! All schemes are per tensor. Dequantization is `real = scale * (q - zp)`
//! and every float-to-integer conversion rounds half away from zero.

mod engine;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::net::exec::{forward_observed, params_from_model, Mode, Plan};
use crate::net::{batch_input, Layer, LayerSpec, ModelGraph, ParamData, ParamTensor, QuantMode, BN_EPSILON};
use crate::rng::SeededRng;
use crate::tensor::round_half_away;

pub use engine::{quantized_forward, Engine, Inference};

/// Largest finite binary16 magnitude.
pub const F16_MAX: f32 = 65504.0;
/// Default number of calibration frames.
pub const CALIBRATION_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantScheme {
    F16,
    DynamicI8,
    Uint8Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub scheme: QuantScheme,
}

impl QuantParams {
    /// Symmetric int8 parameters for values bounded by `max_abs`; an
    /// all-zero tensor gets scale 1.
    pub fn symmetric_i8(max_abs: f32) -> Self {
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
        QuantParams {
            scale,
            zero_point: 0,
            scheme: QuantScheme::DynamicI8,
        }
    }

    /// Affine uint8 parameters for `[min, max]`, widened to contain 0 so
    /// that zero is exactly representable. A zero-width range gets scale 1
    /// and zero point 128.
    pub fn affine_u8(min: f32, max: f32) -> Self {
        let (min, max) = (min.min(0.0), max.max(0.0));
        if max == min {
            return QuantParams {
                scale: 1.0,
                zero_point: 128,
                scheme: QuantScheme::Uint8Affine,
            };
        }
        // zero point from the exact range, so that e.g. [-1, 1] maps 0 to 128
        let scale = (max as f64 - min as f64) / 255.0;
        let zero_point = (-min as f64 / scale).round().clamp(0.0, 255.0) as i32;
        QuantParams {
            scale: scale as f32,
            zero_point,
            scheme: QuantScheme::Uint8Affine,
        }
    }

    pub fn quantize(&self, real: f32) -> i32 {
        let (lo, hi) = match self.scheme {
            QuantScheme::DynamicI8 => (-127, 127),
            QuantScheme::Uint8Affine => (0, 255),
            QuantScheme::F16 => return encode_f16(real) as i32,
        };
        let q = round_half_away(real / self.scale) as i64 + self.zero_point as i64;
        q.clamp(lo, hi) as i32
    }

    pub fn dequantize(&self, q: i32) -> f32 {
        match self.scheme {
            QuantScheme::F16 => decode_f16(q as u16),
            _ => self.scale * (q - self.zero_point) as f32,
        }
    }
}

/// binary16 bit pattern of `x`, round to nearest even, saturating at
/// +-65504.
pub fn encode_f16(x: f32) -> u16 {
    f16::from_f32(x.clamp(-F16_MAX, F16_MAX)).to_bits()
}

pub fn decode_f16(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// `x` after a round trip through binary16.
pub fn round_f16(x: f32) -> f32 {
    decode_f16(encode_f16(x))
}

/// Per-layer output ranges seen over a set of calibration frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    /// `(min, max)` of every layer's output, in layer order.
    pub ranges: Vec<(f32, f32)>,
    pub samples: usize,
}

impl CalibrationProfile {
    /// Combines two profiles of the same model.
    pub fn merge(&self, other: &CalibrationProfile) -> Result<CalibrationProfile> {
        if self.ranges.len() != other.ranges.len() {
            return Err(Error::Quant(format!(
                "profiles cover {} and {} layers",
                self.ranges.len(),
                other.ranges.len()
            )));
        }
        Ok(CalibrationProfile {
            ranges: self
                .ranges
                .iter()
                .zip(&other.ranges)
                .map(|(a, b)| (a.0.min(b.0), a.1.max(b.1)))
                .collect(),
            samples: self.samples + other.samples,
        })
    }
}

fn require_f32(model: &ModelGraph) -> Result<()> {
    if model.quant != QuantMode::F32 {
        return Err(Error::Quant(format!(
            "model is already quantized ({}); quantization starts from an f32 model",
            model.quant.name()
        )));
    }
    model.validate()
}

/// Stores every parameter as binary16.
pub fn quantize_f16(model: &ModelGraph) -> Result<ModelGraph> {
    require_f32(model)?;
    let mut out = model.clone();
    out.quant = QuantMode::F16;
    for layer in &mut out.layers {
        for p in &mut layer.params {
            let bits = p.as_f32()?.iter().map(|&v| encode_f16(v)).collect();
            *p = ParamTensor::quantized(ParamData::F16(bits), 1.0, 0);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Symmetric per-tensor int8 weights for conv and dense layers; biases and
/// normalization parameters stay f32.
pub fn quantize_dynamic(model: &ModelGraph) -> Result<ModelGraph> {
    require_f32(model)?;
    let mut out = model.clone();
    out.quant = QuantMode::DynamicI8;
    for layer in &mut out.layers {
        if matches!(layer.spec, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }) {
            let w = layer.params[0].as_f32()?;
            let qp = QuantParams::symmetric_i8(w.iter().fold(0f32, |m, v| m.max(v.abs())));
            let q = w.iter().map(|&v| qp.quantize(v) as i8).collect();
            layer.params[0] = ParamTensor::quantized(ParamData::I8(q), qp.scale, 0);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Seeded choice of `count` calibration frames from the train split (all
/// of them when there are fewer), returned in ascending order.
pub fn calibration_indices(dataset: &Dataset, count: usize, seed: u64) -> Vec<usize> {
    let mut pool = dataset.indices(Split::Train);
    SeededRng::stream(seed, 2000).shuffle(&mut pool);
    pool.truncate(count);
    pool.sort_unstable();
    pool
}

/// Runs f32 inference over `indices` one frame at a time, recording the
/// min and max of every layer's output.
pub fn calibrate(model: &ModelGraph, dataset: &Dataset, indices: &[usize]) -> Result<CalibrationProfile> {
    require_f32(model)?;
    if indices.is_empty() {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    let plan = Plan::new(model)?;
    if dataset.frame_len() != plan.input_len() {
        return Err(Error::shape(format!(
            "model expects {} pixels per frame, dataset has {}",
            plan.input_len(),
            dataset.frame_len()
        )));
    }
    let params = params_from_model(model)?;
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); model.layers.len()];
    for &i in indices {
        let mut observe = |layer: usize, out: &[f32]| {
            let r = &mut ranges[layer];
            for &v in out {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        };
        forward_observed(&plan, &params, batch_input(dataset, &[i]), 1, Mode::Infer, &mut observe)?;
    }
    Ok(CalibrationProfile {
        ranges,
        samples: indices.len(),
    })
}

/// Profile entry whose range sets the requantization parameters of layer
/// `i`: the ReLU that follows it (across an intervening normalization) if
/// there is one, otherwise the layer's own output.
fn activation_layer(layers: &[Layer], i: usize) -> usize {
    let mut j = i + 1;
    while j < layers.len() {
        match layers[j].spec {
            LayerSpec::BatchNorm { .. } => j += 1,
            LayerSpec::Relu => return j,
            _ => break,
        }
    }
    i
}

/// Full-integer uint8 model. Normalization is folded into the preceding
/// convolution; weights are per-tensor affine uint8, biases int32 at
/// `scale_w * scale_in`, and every conv/dense layer carries the affine
/// parameters of its (post-ReLU) output. The input quantization is fixed to
/// scale 1/255 and zero point 0, so raw pixels feed the first layer.
pub fn quantize_uint8(model: &ModelGraph, profile: &CalibrationProfile) -> Result<ModelGraph> {
    require_f32(model)?;
    if profile.ranges.len() != model.layers.len() {
        return Err(Error::Quant(format!(
            "calibration profile covers {} layers, model has {}",
            profile.ranges.len(),
            model.layers.len()
        )));
    }
    if let Some((i, _)) = profile.ranges.iter().enumerate().find(|(_, r)| !(r.0 <= r.1)) {
        return Err(Error::Quant(format!("calibration profile has no range for layer {i}")));
    }

    let mut out = model.clone();
    out.quant = QuantMode::Uint8Affine;
    let mut input_scale = 1.0f32 / 255.0;
    for i in 0..model.layers.len() {
        let spec = model.layers[i].spec;
        match spec {
            LayerSpec::Conv2d { out_channels, .. } | LayerSpec::Dense { outputs: out_channels, .. } => {
                let mut w = model.layers[i].params[0].as_f32()?.to_vec();
                let mut b = model.layers[i].params[1].as_f32()?.to_vec();
                if let Some(LayerSpec::BatchNorm { .. }) = model.layers.get(i + 1).map(|l| l.spec) {
                    fold_batchnorm(&mut w, &mut b, out_channels, &model.layers[i + 1].params)?;
                }
                let (lo, hi) = w.iter().fold((0f32, 0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                let wq = QuantParams::affine_u8(lo, hi);
                let qw = w.iter().map(|&v| wq.quantize(v) as u8).collect();
                let bias_scale = wq.scale * input_scale;
                let qb = b
                    .iter()
                    .map(|&v| {
                        let q = (v as f64 / bias_scale as f64).abs().round().copysign(v as f64);
                        q.clamp(i32::MIN as f64, i32::MAX as f64) as i32
                    })
                    .collect();
                let (amin, amax) = profile.ranges[activation_layer(&model.layers, i)];
                let aq = QuantParams::affine_u8(amin, amax);
                out.layers[i].params = vec![
                    ParamTensor::quantized(ParamData::U8(qw), wq.scale, wq.zero_point),
                    ParamTensor::quantized(ParamData::I32(qb), bias_scale, 0),
                    ParamTensor::qparams(aq.scale, aq.zero_point),
                ];
                input_scale = aq.scale;
            }
            LayerSpec::BatchNorm { .. } => out.layers[i].params.clear(),
            _ => {}
        }
    }
    out.validate()?;
    Ok(out)
}

/// Rewrites conv weights `[.., cout]` and bias so the conv output equals
/// the normalized output in inference mode.
fn fold_batchnorm(w: &mut [f32], b: &mut [f32], cout: usize, bn: &[ParamTensor]) -> Result<()> {
    let (gamma, beta, mean, var) = (bn[0].as_f32()?, bn[1].as_f32()?, bn[2].as_f32()?, bn[3].as_f32()?);
    let factor: Vec<f64> = (0..cout)
        .map(|c| gamma[c] as f64 / (var[c] as f64 + BN_EPSILON as f64).sqrt())
        .collect();
    for (k, v) in w.iter_mut().enumerate() {
        *v = (*v as f64 * factor[k % cout]) as f32;
    }
    for c in 0..cout {
        b[c] = ((b[c] as f64 - mean[c] as f64) * factor[c] + beta[c] as f64) as f32;
    }
    Ok(())
}
