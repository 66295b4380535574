//! The `UQM1` model file.
//!
//! ```text
//! magic "UQM1" | version u8 = 1 | quant_mode u8 | layer_count u16
//! per layer:  layer_type u8 | dim_count u8 | dims u32[dim_count]
//!             then one record per parameter tensor:
//!             dtype u8 | byte_len u32 | scale f32 | zero_point i32 | raw bytes
//! ```
//!
//! All integers and floats are little-endian. The number of records of a
//! layer follows from its type and the quant mode. Layer type 0 is a
//! metadata entry that always comes first and carries the input shape and
//! the number of epochs trained as its dims.

use std::fs;
use std::path::Path;

use super::model::{DType, Layer, LayerSpec, ModelGraph, ParamData, ParamTensor, QuantMode};
use crate::error::{FormatError, Result};
use crate::tensor::Padding;

pub const MODEL_MAGIC: [u8; 4] = *b"UQM1";
pub const MODEL_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 8;
pub const RECORD_HEADER_BYTES: usize = 13;

const LT_INPUT: u8 = 0;
const LT_CONV: u8 = 1;
const LT_NORM: u8 = 2;
const LT_RELU: u8 = 3;
const LT_POOL: u8 = 4;
const LT_FLATTEN: u8 = 5;
const LT_DENSE: u8 = 6;
const LT_SOFTMAX: u8 = 7;

fn layer_code(spec: &LayerSpec) -> (u8, Vec<u32>) {
    match *spec {
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride,
            padding,
        } => (
            LT_CONV,
            vec![
                kernel_h as u32,
                kernel_w as u32,
                in_channels as u32,
                out_channels as u32,
                stride as u32,
                match padding {
                    Padding::Same => 0,
                    Padding::Valid => 1,
                },
            ],
        ),
        LayerSpec::BatchNorm { channels } => (LT_NORM, vec![channels as u32]),
        LayerSpec::Relu => (LT_RELU, vec![]),
        LayerSpec::MaxPool { window, stride } => (LT_POOL, vec![window as u32, stride as u32]),
        LayerSpec::Flatten => (LT_FLATTEN, vec![]),
        LayerSpec::Dense { inputs, outputs } => (LT_DENSE, vec![inputs as u32, outputs as u32]),
        LayerSpec::Softmax => (LT_SOFTMAX, vec![]),
    }
}

fn push_record(out: &mut Vec<u8>, p: &ParamTensor) {
    out.push(p.dtype() as u8);
    out.extend_from_slice(&(p.byte_len() as u32).to_le_bytes());
    out.extend_from_slice(&p.scale.to_le_bytes());
    out.extend_from_slice(&p.zero_point.to_le_bytes());
    match &p.data {
        ParamData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ParamData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ParamData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        ParamData::U8(v) => out.extend_from_slice(v),
        ParamData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ParamData::Empty => {}
    }
}

pub fn encode_model(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + model.payload_bytes() + 64 * model.layers.len());
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.push(model.quant as u8);
    out.extend_from_slice(&((model.layers.len() + 1) as u16).to_le_bytes());

    let [h, w, c] = model.input_shape;
    out.push(LT_INPUT);
    out.push(4);
    for d in [h as u32, w as u32, c as u32, model.epochs_trained] {
        out.extend_from_slice(&d.to_le_bytes());
    }

    for layer in &model.layers {
        let (code, dims) = layer_code(&layer.spec);
        out.push(code);
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for p in &layer.params {
            push_record(&mut out, p);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_spec(code: u8, dims: &[u32]) -> std::result::Result<LayerSpec, FormatError> {
    let d = |i: usize| dims[i] as usize;
    let want = |n: usize| -> std::result::Result<(), FormatError> {
        if dims.len() == n {
            Ok(())
        } else {
            Err(FormatError::Validation(format!(
                "layer type {code} has {} dims, expected {n}",
                dims.len()
            )))
        }
    };
    Ok(match code {
        LT_CONV => {
            want(6)?;
            LayerSpec::Conv2d {
                kernel_h: d(0),
                kernel_w: d(1),
                in_channels: d(2),
                out_channels: d(3),
                stride: d(4),
                padding: match dims[5] {
                    0 => Padding::Same,
                    1 => Padding::Valid,
                    p => return Err(FormatError::UnknownCode(format!("padding {p}"))),
                },
            }
        }
        LT_NORM => {
            want(1)?;
            LayerSpec::BatchNorm { channels: d(0) }
        }
        LT_RELU => {
            want(0)?;
            LayerSpec::Relu
        }
        LT_POOL => {
            want(2)?;
            LayerSpec::MaxPool { window: d(0), stride: d(1) }
        }
        LT_FLATTEN => {
            want(0)?;
            LayerSpec::Flatten
        }
        LT_DENSE => {
            want(2)?;
            LayerSpec::Dense { inputs: d(0), outputs: d(1) }
        }
        LT_SOFTMAX => {
            want(0)?;
            LayerSpec::Softmax
        }
        other => return Err(FormatError::UnknownCode(format!("layer type {other}"))),
    })
}

fn read_record(r: &mut Reader<'_>) -> std::result::Result<ParamTensor, FormatError> {
    let dtype_code = r.u8("record dtype")?;
    let dtype = DType::from_code(dtype_code)
        .ok_or_else(|| FormatError::UnknownCode(format!("dtype {dtype_code}")))?;
    let byte_len = r.u32("record length")? as usize;
    let scale = f32::from_le_bytes(r.take(4, "scale")?.try_into().unwrap());
    let zero_point = i32::from_le_bytes(r.take(4, "zero point")?.try_into().unwrap());
    let size = dtype.size();
    if (size == 0 && byte_len != 0) || (size > 0 && byte_len % size != 0) {
        return Err(FormatError::LengthMismatch(format!(
            "{byte_len} bytes is not a whole number of {dtype:?} elements"
        )));
    }
    let raw = r.take(byte_len, "record payload")?;
    let data = match dtype {
        DType::F32 => ParamData::F32(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        DType::F16 => ParamData::F16(
            raw.chunks_exact(2)
                .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        DType::I8 => ParamData::I8(raw.iter().map(|&b| b as i8).collect()),
        DType::U8 => ParamData::U8(raw.to_vec()),
        DType::I32 => ParamData::I32(
            raw.chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        DType::QParams => ParamData::Empty,
    };
    Ok(ParamTensor {
        data,
        scale,
        zero_point,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(FormatError::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u8("version")?;
    if version != MODEL_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: MODEL_VERSION,
            found: version,
        }
        .into());
    }
    let mode_code = r.u8("quant mode")?;
    let quant = QuantMode::from_code(mode_code)
        .ok_or_else(|| FormatError::UnknownCode(format!("quant mode {mode_code}")))?;
    let layer_count = r.u16("layer count")? as usize;
    if layer_count == 0 {
        return Err(FormatError::Validation("no layers".into()).into());
    }

    let mut input_shape = None;
    let mut epochs_trained = 0;
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let code = r.u8("layer type")?;
        let ndims = r.u8("dim count")? as usize;
        let dims = (0..ndims)
            .map(|_| r.u32("layer dims"))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if i == 0 {
            if code != LT_INPUT || dims.len() != 4 {
                return Err(FormatError::Validation("first layer must be the input entry".into()).into());
            }
            input_shape = Some([dims[0] as usize, dims[1] as usize, dims[2] as usize]);
            epochs_trained = dims[3];
            continue;
        }
        let spec = decode_spec(code, &dims)?;
        let records = spec.param_layout(quant).len();
        let params = (0..records)
            .map(|_| read_record(&mut r))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        layers.push(Layer { spec, params });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::LengthMismatch(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        ))
        .into());
    }
    let model = ModelGraph {
        input_shape: input_shape.expect("first layer handled above"),
        epochs_trained,
        quant,
        layers,
    };
    model.validate()?;
    Ok(model)
}

/// Writes the model and returns the number of bytes written.
pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<usize> {
    model.validate()?;
    let bytes = encode_model(model);
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let bytes = fs::read(path)?;
    decode_model(&bytes)
}

/// Size of the layer table (type, dim count and dims of every layer,
/// including the leading input entry).
pub fn layer_table_bytes(model: &ModelGraph) -> usize {
    let input_entry = 2 + 4 * 4;
    input_entry
        + model
            .layers
            .iter()
            .map(|l| 2 + 4 * layer_code(&l.spec).1.len())
            .sum::<usize>()
}
