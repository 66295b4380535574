//! The gesture CNN: architecture, batched execution, training and the
//! `UQM1` model file.

pub mod exec;
mod format;
mod model;
mod train;

pub use format::{
    decode_model, encode_model, layer_table_bytes, load_model, save_model, HEADER_BYTES, MODEL_MAGIC,
    MODEL_VERSION, RECORD_HEADER_BYTES,
};
pub use model::*;
pub use train::{train, Adam, EpochStats, TrainConfig, TrainHistory};

pub(crate) use train::batch_input;

use crate::error::Result;
use crate::quant::Engine;
use crate::tensor::Tensor;

/// Class probabilities for one `[80, 80, 1]` frame. Pixels are divided by
/// 255 before the first layer. Quantized models run their own numeric path
/// (see [`crate::quant`]).
pub fn forward(model: &ModelGraph, frame: &Tensor<u8>) -> Result<Tensor<f32>> {
    Engine::prepare(model)?.forward(frame)
}
