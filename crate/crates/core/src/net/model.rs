use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::rng::SeededRng;
use crate::tensor::{conv2d_output_dims, Padding};

/// Side length of the downsampled frame the network consumes.
pub const FRAME_SIDE: usize = 80;
pub const INPUT_SHAPE: [usize; 3] = [FRAME_SIDE, FRAME_SIDE, 1];
pub const NUM_CLASSES: usize = 4;
pub const CONV_BLOCKS: usize = 5;
pub const DEFAULT_FILTERS: [usize; CONV_BLOCKS] = [8, 16, 32, 64, 64];
pub const DEFAULT_HIDDEN: usize = 128;
pub const BN_EPSILON: f32 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum GestureLabel {
    OpenHand = 0,
    IndexPinch = 1,
    MiddlePinch = 2,
    RingPinch = 3,
}

impl GestureLabel {
    pub const ALL: [GestureLabel; NUM_CLASSES] = [
        GestureLabel::OpenHand,
        GestureLabel::IndexPinch,
        GestureLabel::MiddlePinch,
        GestureLabel::RingPinch,
    ];

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureLabel::OpenHand => "open_hand",
            GestureLabel::IndexPinch => "index_pinch",
            GestureLabel::MiddlePinch => "middle_pinch",
            GestureLabel::RingPinch => "ring_pinch",
        }
    }
}

/// Storage scheme of a model's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum QuantMode {
    F32 = 0,
    F16 = 1,
    DynamicI8 = 2,
    Uint8Affine = 3,
}

impl QuantMode {
    pub const ALL: [QuantMode; 4] = [
        QuantMode::F32,
        QuantMode::F16,
        QuantMode::DynamicI8,
        QuantMode::Uint8Affine,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantMode::F32 => "f32",
            QuantMode::F16 => "f16",
            QuantMode::DynamicI8 => "dynamic",
            QuantMode::Uint8Affine => "uint8",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F16 = 1,
    I8 = 2,
    U8 = 3,
    I32 = 4,
    /// Payload-free record carrying only scale and zero point.
    QParams = 5,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        [DType::F32, DType::F16, DType::I8, DType::U8, DType::I32, DType::QParams]
            .get(code as usize)
            .copied()
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I8 | DType::U8 => 1,
            DType::QParams => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamData {
    F32(Vec<f32>),
    /// binary16 bit patterns.
    F16(Vec<u16>),
    I8(Vec<i8>),
    U8(Vec<u8>),
    I32(Vec<i32>),
    Empty,
}

impl ParamData {
    pub fn dtype(&self) -> DType {
        match self {
            ParamData::F32(_) => DType::F32,
            ParamData::F16(_) => DType::F16,
            ParamData::I8(_) => DType::I8,
            ParamData::U8(_) => DType::U8,
            ParamData::I32(_) => DType::I32,
            ParamData::Empty => DType::QParams,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ParamData::F32(v) => v.len(),
            ParamData::F16(v) => v.len(),
            ParamData::I8(v) => v.len(),
            ParamData::U8(v) => v.len(),
            ParamData::I32(v) => v.len(),
            ParamData::Empty => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One stored parameter tensor. `scale`/`zero_point` are 1.0/0 when the
/// storage type does not use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub data: ParamData,
    pub scale: f32,
    pub zero_point: i32,
}

impl ParamTensor {
    pub fn f32(values: Vec<f32>) -> Self {
        ParamTensor {
            data: ParamData::F32(values),
            scale: 1.0,
            zero_point: 0,
        }
    }

    pub fn quantized(data: ParamData, scale: f32, zero_point: i32) -> Self {
        ParamTensor {
            data,
            scale,
            zero_point,
        }
    }

    pub fn qparams(scale: f32, zero_point: i32) -> Self {
        Self::quantized(ParamData::Empty, scale, zero_point)
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            ParamData::F32(v) => Ok(v),
            other => Err(Error::Quant(format!("expected f32 parameters, found {:?}", other.dtype()))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut Vec<f32>> {
        match &mut self.data {
            ParamData::F32(v) => Ok(v),
            other => Err(Error::Quant(format!("expected f32 parameters, found {:?}", other.dtype()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Error::shape(format!("{} layer cannot take input {input:?}: {what}", self.name()))
        };
        match *self {
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
                padding,
            } => {
                let &[h, w, c] = input else {
                    return Err(bad("expected [H,W,C]"));
                };
                if c != in_channels {
                    return Err(bad("channel count"));
                }
                let (oh, ow, _, _) = conv2d_output_dims(h, w, kernel_h, kernel_w, stride, padding)?;
                Ok(vec![oh, ow, out_channels])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.last() != Some(&channels) {
                    return Err(bad("channel count"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { window, stride } => {
                if window != 2 || stride != 2 {
                    return Err(bad("only 2x2 windows with stride 2 are supported"));
                }
                let &[h, w, c] = input else {
                    return Err(bad("expected [H,W,C]"));
                };
                if h < 2 || w < 2 {
                    return Err(bad("spatial size below window"));
                }
                Ok(vec![h / 2, w / 2, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(bad("input length"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(bad("expected rank 1"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Expected (dtype, element count) of each stored parameter record for
    /// this layer under `mode`.
    pub fn param_layout(&self, mode: QuantMode) -> Vec<(DType, usize)> {
        let (weights, bias) = match *self {
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                ..
            } => (kernel_h * kernel_w * in_channels * out_channels, out_channels),
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs, outputs),
            LayerSpec::BatchNorm { channels } => {
                return match mode {
                    QuantMode::F32 | QuantMode::DynamicI8 => vec![(DType::F32, channels); 4],
                    QuantMode::F16 => vec![(DType::F16, channels); 4],
                    // folded into the preceding convolution
                    QuantMode::Uint8Affine => vec![],
                };
            }
            _ => return vec![],
        };
        match mode {
            QuantMode::F32 => vec![(DType::F32, weights), (DType::F32, bias)],
            QuantMode::F16 => vec![(DType::F16, weights), (DType::F16, bias)],
            QuantMode::DynamicI8 => vec![(DType::I8, weights), (DType::F32, bias)],
            QuantMode::Uint8Affine => vec![
                (DType::U8, weights),
                (DType::I32, bias),
                (DType::QParams, 0),
            ],
        }
    }

    /// Parameter shapes for the f32 layout, in record order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                ..
            } => vec![
                vec![kernel_h, kernel_w, in_channels, out_channels],
                vec![out_channels],
            ],
            LayerSpec::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerSpec::BatchNorm { channels } => vec![vec![channels]; 4],
            _ => vec![],
        }
    }

    /// Indices of the parameter records updated by the optimizer (running
    /// statistics of normalization layers are not).
    pub fn learnable_params(&self) -> &'static [usize] {
        match self {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } | LayerSpec::BatchNorm { .. } => &[0, 1],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<ParamTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input_shape: [usize; 3],
    pub epochs_trained: u32,
    pub quant: QuantMode,
    pub layers: Vec<Layer>,
}

impl ModelGraph {
    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l.spec {
                LayerSpec::Dense { outputs, .. } => Some(outputs),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Output shape after every layer, checking the whole chain.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.spec.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Total stored parameter elements (including normalization running
    /// statistics).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(|p| p.data.len())
            .sum()
    }

    pub fn learnable_param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.spec.learnable_params().iter().map(move |&i| &l.params[i]))
            .map(|p| p.data.len())
            .sum()
    }

    /// Bytes of parameter payload, excluding headers and layer table.
    pub fn payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(ParamTensor::byte_len)
            .sum()
    }

    /// Checks the structural invariants: the shape chain, the five
    /// conv/norm/relu/pool blocks ahead of the flatten, a four-way softmax
    /// head, and parameter records matching the quantization mode.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Format(FormatError::Validation(msg));
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(fail(format!("input shape {:?}", self.input_shape)));
        }
        let shapes = self.layer_shapes().map_err(|e| fail(e.to_string()))?;

        let flatten_at = self
            .layers
            .iter()
            .position(|l| l.spec == LayerSpec::Flatten)
            .ok_or_else(|| fail("no flatten layer".into()))?;
        if flatten_at != CONV_BLOCKS * 4 {
            return Err(fail(format!(
                "expected {CONV_BLOCKS} conv blocks before flatten, found {flatten_at} layers"
            )));
        }
        for (b, block) in self.layers[..flatten_at].chunks(4).enumerate() {
            let ok = matches!(
                (&block[0].spec, &block[1].spec, &block[2].spec, &block[3].spec),
                (LayerSpec::Conv2d { .. }, LayerSpec::BatchNorm { .. }, LayerSpec::Relu, LayerSpec::MaxPool { .. })
            );
            if !ok {
                return Err(fail(format!("block {b} is not conv/batchnorm/relu/maxpool")));
            }
        }
        for layer in &self.layers[flatten_at + 1..] {
            if !matches!(layer.spec, LayerSpec::Dense { .. } | LayerSpec::Relu | LayerSpec::Softmax) {
                return Err(fail(format!("unexpected {} layer in the head", layer.spec.name())));
            }
        }
        match self.layers.last() {
            Some(Layer { spec: LayerSpec::Softmax, .. }) => {}
            _ => return Err(fail("model must end in softmax".into())),
        }
        if shapes.last().map(Vec::as_slice) != Some(&[NUM_CLASSES]) {
            return Err(fail(format!("model must output {NUM_CLASSES} classes")));
        }

        for (i, layer) in self.layers.iter().enumerate() {
            let layout = layer.spec.param_layout(self.quant);
            if layout.len() != layer.params.len() {
                return Err(fail(format!(
                    "layer {i} ({}) has {} parameter records, expected {}",
                    layer.spec.name(),
                    layer.params.len(),
                    layout.len()
                )));
            }
            for (j, (p, (dtype, len))) in layer.params.iter().zip(layout).enumerate() {
                if p.dtype() != dtype || p.data.len() != len {
                    return Err(fail(format!(
                        "layer {i} record {j}: {:?}x{} where {dtype:?}x{len} expected",
                        p.dtype(),
                        p.data.len()
                    )));
                }
                if !(p.scale.is_finite() && p.scale > 0.0) {
                    return Err(fail(format!("layer {i} record {j}: scale {}", p.scale)));
                }
                let zp_ok = match dtype {
                    DType::U8 | DType::QParams => (0..=255).contains(&p.zero_point),
                    _ => p.zero_point == 0,
                };
                if !zp_ok {
                    return Err(fail(format!("layer {i} record {j}: zero point {}", p.zero_point)));
                }
            }
        }
        Ok(())
    }
}

/// Architecture description used by [`build_model`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub filters: [usize; CONV_BLOCKS],
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_shape: INPUT_SHAPE,
            filters: DEFAULT_FILTERS,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

/// The default network: 80x80x1 input, five blocks of 3x3 same conv,
/// batch norm, ReLU and 2x2 max pool with (8, 16, 32, 64, 64) filters,
/// then flatten (2x2x64), dense 128 + ReLU, dense 4 and softmax.
pub fn build_default_model(seed: u64) -> ModelGraph {
    build_model(&Architecture::default(), seed).expect("default architecture is valid")
}

/// He-uniform initialised weights (limit sqrt(6 / fan_in)), zero biases,
/// unit gamma, zero beta, running mean 0 and running variance 1.
pub fn build_model(arch: &Architecture, seed: u64) -> Result<ModelGraph> {
    let mut rng = SeededRng::new(seed);
    let mut he = |fan_in: usize, n: usize| -> Vec<f32> {
        let limit = (6.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.uniform_range(-limit, limit) as f32).collect()
    };

    let mut layers = Vec::new();
    let mut channels = arch.input_shape[2];
    for &filters in &arch.filters {
        let spec = LayerSpec::Conv2d {
            kernel_h: 3,
            kernel_w: 3,
            in_channels: channels,
            out_channels: filters,
            stride: 1,
            padding: Padding::Same,
        };
        let fan_in = 9 * channels;
        layers.push(Layer {
            spec,
            params: vec![
                ParamTensor::f32(he(fan_in, fan_in * filters)),
                ParamTensor::f32(vec![0.0; filters]),
            ],
        });
        layers.push(Layer {
            spec: LayerSpec::BatchNorm { channels: filters },
            params: vec![
                ParamTensor::f32(vec![1.0; filters]),
                ParamTensor::f32(vec![0.0; filters]),
                ParamTensor::f32(vec![0.0; filters]),
                ParamTensor::f32(vec![1.0; filters]),
            ],
        });
        layers.push(Layer { spec: LayerSpec::Relu, params: vec![] });
        layers.push(Layer {
            spec: LayerSpec::MaxPool { window: 2, stride: 2 },
            params: vec![],
        });
        channels = filters;
    }
    let mut side = [arch.input_shape[0], arch.input_shape[1]];
    for _ in 0..CONV_BLOCKS {
        side = [side[0] / 2, side[1] / 2];
    }
    let flat = side[0] * side[1] * channels;
    if flat == 0 {
        return Err(Error::shape(format!(
            "input {:?} too small for {CONV_BLOCKS} pooling stages",
            arch.input_shape
        )));
    }
    layers.push(Layer { spec: LayerSpec::Flatten, params: vec![] });
    layers.push(Layer {
        spec: LayerSpec::Dense { inputs: flat, outputs: arch.hidden },
        params: vec![
            ParamTensor::f32(he(flat, flat * arch.hidden)),
            ParamTensor::f32(vec![0.0; arch.hidden]),
        ],
    });
    layers.push(Layer { spec: LayerSpec::Relu, params: vec![] });
    layers.push(Layer {
        spec: LayerSpec::Dense { inputs: arch.hidden, outputs: NUM_CLASSES },
        params: vec![
            ParamTensor::f32(he(arch.hidden, arch.hidden * NUM_CLASSES)),
            ParamTensor::f32(vec![0.0; NUM_CLASSES]),
        ],
    });
    layers.push(Layer { spec: LayerSpec::Softmax, params: vec![] });

    let model = ModelGraph {
        input_shape: arch.input_shape,
        epochs_trained: 0,
        quant: QuantMode::F32,
        layers,
    };
    model.validate()?;
    Ok(model)
}
