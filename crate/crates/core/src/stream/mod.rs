//! UDP frame streaming: the two datagram formats, chunking and
//! reassembly, the inference server and the replaying client.
//!
//! ```text
//! FrameChunk    magic u16 0x5547 | version u8 1 | type u8 0x01 | frame_id u32
//!               | chunk_index u16 | chunk_count u16 | payload_len u16 | payload
//! PredictionMsg magic u16 0x5547 | version u8 1 | type u8 0x02 | frame_id u32
//!               | class u8 | flags u8 | 4 x f32 probabilities | inference_micros u32
//! ```
//!
//! Big-endian throughout. A prediction is always 30 bytes.

mod client;
mod reassembly;
mod server;

use thiserror::Error;

use crate::error::{Error, Result};

pub use client::{stream_client, ClientConfig, ClientReport};
pub(crate) use client::percentile;
pub use reassembly::{Insert, ReassemblyBuffer, EXPIRY, MAX_IN_FLIGHT};
pub use server::{serve, Policy, ServerConfig, ServerHandle, ServerStats};

pub const WIRE_MAGIC: u16 = 0x5547;
pub const WIRE_VERSION: u8 = 1;
pub const MSG_FRAME_CHUNK: u8 = 0x01;
pub const MSG_PREDICTION: u8 = 0x02;
pub const CHUNK_HEADER_BYTES: usize = 14;
pub const MAX_PAYLOAD: usize = 1280;
pub const PREDICTION_BYTES: usize = 30;

/// `flags` bit: every chunk of the frame arrived.
pub const FLAG_COMPLETE: u8 = 0x01;
/// `flags` bit: the server could not run the frame (probabilities are
/// uniform and carry no information).
pub const FLAG_ERROR: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("datagram of {0} bytes is too short")]
    TooShort(usize),
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unexpected message type {0:#04x}")]
    BadType(u8),
    #[error("payload_len {declared} but {actual} payload bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("chunk {index} of {count}")]
    BadChunkIndex { index: u16, count: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameChunk {
    pub frame_id: u32,
    pub chunk_index: u16,
    pub chunk_count: u16,
    pub payload: Vec<u8>,
}

fn check_header(bytes: &[u8], msg_type: u8, min_len: usize) -> std::result::Result<(), WireError> {
    if bytes.len() < min_len {
        return Err(WireError::TooShort(bytes.len()));
    }
    let magic = u16::from_be_bytes([bytes[0], bytes[1]]);
    if magic != WIRE_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[2] != WIRE_VERSION {
        return Err(WireError::BadVersion(bytes[2]));
    }
    if bytes[3] != msg_type {
        return Err(WireError::BadType(bytes[3]));
    }
    Ok(())
}

impl FrameChunk {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHUNK_HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&WIRE_MAGIC.to_be_bytes());
        out.push(WIRE_VERSION);
        out.push(MSG_FRAME_CHUNK);
        out.extend_from_slice(&self.frame_id.to_be_bytes());
        out.extend_from_slice(&self.chunk_index.to_be_bytes());
        out.extend_from_slice(&self.chunk_count.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, WireError> {
        check_header(bytes, MSG_FRAME_CHUNK, CHUNK_HEADER_BYTES)?;
        let be16 = |at: usize| u16::from_be_bytes([bytes[at], bytes[at + 1]]);
        let frame_id = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
        let (chunk_index, chunk_count) = (be16(8), be16(10));
        let declared = be16(12) as usize;
        let payload = &bytes[CHUNK_HEADER_BYTES..];
        if payload.len() != declared || declared > MAX_PAYLOAD {
            return Err(WireError::LengthMismatch {
                declared,
                actual: payload.len(),
            });
        }
        if chunk_index >= chunk_count {
            return Err(WireError::BadChunkIndex {
                index: chunk_index,
                count: chunk_count,
            });
        }
        Ok(FrameChunk {
            frame_id,
            chunk_index,
            chunk_count,
            payload: payload.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMsg {
    pub frame_id: u32,
    pub predicted_class: u8,
    pub flags: u8,
    pub probabilities: [f32; 4],
    pub inference_micros: u32,
}

impl PredictionMsg {
    pub fn encode(&self) -> [u8; PREDICTION_BYTES] {
        let mut out = [0u8; PREDICTION_BYTES];
        out[0..2].copy_from_slice(&WIRE_MAGIC.to_be_bytes());
        out[2] = WIRE_VERSION;
        out[3] = MSG_PREDICTION;
        out[4..8].copy_from_slice(&self.frame_id.to_be_bytes());
        out[8] = self.predicted_class;
        out[9] = self.flags;
        for (k, p) in self.probabilities.iter().enumerate() {
            out[10 + 4 * k..14 + 4 * k].copy_from_slice(&p.to_be_bytes());
        }
        out[26..30].copy_from_slice(&self.inference_micros.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, WireError> {
        check_header(bytes, MSG_PREDICTION, PREDICTION_BYTES)?;
        if bytes.len() != PREDICTION_BYTES {
            return Err(WireError::LengthMismatch {
                declared: PREDICTION_BYTES,
                actual: bytes.len(),
            });
        }
        let be32 = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
        let mut probabilities = [0f32; 4];
        for (k, p) in probabilities.iter_mut().enumerate() {
            *p = f32::from_bits(be32(10 + 4 * k));
        }
        Ok(PredictionMsg {
            frame_id: be32(4),
            predicted_class: bytes[8],
            flags: bytes[9],
            probabilities,
            inference_micros: be32(26),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.flags & FLAG_COMPLETE != 0
    }

    pub fn is_error(&self) -> bool {
        self.flags & FLAG_ERROR != 0
    }
}

/// Splits `frame` into payloads of at most [`MAX_PAYLOAD`] bytes, sized as
/// evenly as possible (a 6400-byte frame gives five 1280-byte chunks).
pub fn chunk_frame(frame: &[u8], frame_id: u32) -> Result<Vec<FrameChunk>> {
    if frame.is_empty() {
        return Err(Error::InvalidArgument("cannot chunk an empty frame".into()));
    }
    let count = frame.len().div_ceil(MAX_PAYLOAD);
    let chunk_count = u16::try_from(count)
        .map_err(|_| Error::InvalidArgument(format!("frame of {} bytes needs {count} chunks", frame.len())))?;
    let base = frame.len() / count;
    let extra = frame.len() % count;
    let mut chunks = Vec::with_capacity(count);
    let mut at = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        chunks.push(FrameChunk {
            frame_id,
            chunk_index: i as u16,
            chunk_count,
            payload: frame[at..at + len].to_vec(),
        });
        at += len;
    }
    Ok(chunks)
}

/// Concatenates a complete chunk set (any order, duplicates allowed).
pub fn reassemble(chunks: &[FrameChunk]) -> Result<Vec<u8>> {
    let Some(first) = chunks.first() else {
        return Err(Error::InvalidArgument("no chunks".into()));
    };
    let mut buf = ReassemblyBuffer::new(EXPIRY, MAX_IN_FLIGHT);
    let now = std::time::Instant::now();
    for c in chunks {
        if c.frame_id != first.frame_id {
            return Err(Error::InvalidArgument("chunks of different frames".into()));
        }
        if let Insert::Complete { frame, .. } = buf.insert(c.clone(), now) {
            return Ok(frame);
        }
    }
    Err(Error::InvalidArgument(format!("frame {} is incomplete", first.frame_id)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_sizes() {
        let frame: Vec<u8> = (0..6400u32).map(|v| v as u8).collect();
        let chunks = chunk_frame(&frame, 9).unwrap();
        assert_eq!(chunks.len(), 5);
        assert!(chunks.iter().all(|c| c.payload.len() == 1280 && c.chunk_count == 5));
        assert_eq!(chunks[0].encode().len(), CHUNK_HEADER_BYTES + 1280);

        let odd = chunk_frame(&[1u8; 1281], 1).unwrap();
        assert_eq!(odd.iter().map(|c| c.payload.len()).collect::<Vec<_>>(), [641, 640]);
        assert!(chunk_frame(&[], 1).is_err());
    }

    #[test]
    fn reversed_delivery() {
        let frame: Vec<u8> = (0..6400u32).map(|v| (v * 7) as u8).collect();
        let mut chunks = chunk_frame(&frame, 3).unwrap();
        chunks.reverse();
        assert_eq!(reassemble(&chunks).unwrap(), frame);
        assert!(reassemble(&chunks[1..]).is_err());
    }

    #[test]
    fn prediction_layout() {
        let msg = PredictionMsg {
            frame_id: 0x01020304,
            predicted_class: 2,
            flags: FLAG_COMPLETE,
            probabilities: [0.1, 0.2, 0.6, 0.1],
            inference_micros: 1234,
        };
        let bytes = msg.encode();
        assert_eq!(&bytes[..8], &[0x55, 0x47, 1, 2, 1, 2, 3, 4]);
        assert_eq!(PredictionMsg::decode(&bytes).unwrap(), msg);
        assert_eq!(PredictionMsg::decode(&bytes[..29]), Err(WireError::TooShort(29)));
    }

    #[test]
    fn rejects_malformed_chunks() {
        let good = FrameChunk {
            frame_id: 1,
            chunk_index: 0,
            chunk_count: 2,
            payload: vec![5; 10],
        }
        .encode();
        assert!(FrameChunk::decode(&good).is_ok());
        assert_eq!(FrameChunk::decode(&[1, 2, 3]), Err(WireError::TooShort(3)));
        let mut bad = good.clone();
        bad[0] = 0;
        assert!(matches!(FrameChunk::decode(&bad), Err(WireError::BadMagic(_))));
        let mut bad = good.clone();
        bad[3] = MSG_PREDICTION;
        assert_eq!(FrameChunk::decode(&bad), Err(WireError::BadType(2)));
        let mut bad = good.clone();
        bad[9] = 2;
        assert!(matches!(FrameChunk::decode(&bad), Err(WireError::BadChunkIndex { .. })));
        assert!(matches!(
            FrameChunk::decode(&good[..good.len() - 1]),
            Err(WireError::LengthMismatch { .. })
        ));
    }
}
