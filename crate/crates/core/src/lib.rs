//! Edge gesture recognition from forearm ultrasound frames: a small CNN
//! runtime and trainer, three post-training quantization schemes, a
//! deterministic synthetic frame generator and a UDP frame-streaming
//! protocol.

pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod quant;
pub mod rng;
pub mod stream;
pub mod tensor;

pub use error::{Error, FormatError, Result};
