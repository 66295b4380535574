//! The `UGD1` dataset file.
//!
//! ```text
//! magic "UGD1" | version u8 = 1 | count u32 | height u16 | width u16 | seed u64
//! per frame: label u8 | split u8 (0 train, 1 test) | height*width pixels
//! ```
//!
//! Little-endian throughout; the header is 21 bytes.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{FormatError, Result};
use crate::net::GestureLabel;

pub const DATASET_MAGIC: [u8; 4] = *b"UGD1";
pub const DATASET_VERSION: u8 = 1;
pub const DATASET_HEADER_BYTES: usize = 21;

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let (Ok(h), Ok(w), Ok(n)) = (
        u16::try_from(d.height),
        u16::try_from(d.width),
        u32::try_from(d.len()),
    ) else {
        return Err(FormatError::LengthMismatch("dataset too large for UGD1".into()).into());
    };
    let mut out = Vec::with_capacity(DATASET_HEADER_BYTES + d.len() * (d.frame_len() + 2));
    out.extend_from_slice(&DATASET_MAGIC);
    out.push(DATASET_VERSION);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&d.seed.to_le_bytes());
    for i in 0..d.len() {
        out.push(d.label(i).id());
        out.push(d.split_of(i) as u8);
        out.extend_from_slice(d.frame(i));
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated("missing magic".into()).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        }
        .into());
    }
    if bytes.len() < DATASET_HEADER_BYTES {
        return Err(FormatError::Truncated(format!("header needs {DATASET_HEADER_BYTES} bytes")).into());
    }
    if bytes[4] != DATASET_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: DATASET_VERSION,
            found: bytes[4],
        }
        .into());
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let height = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
    let width = u16::from_le_bytes(bytes[11..13].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[13..21].try_into().unwrap());

    let record = height * width + 2;
    let body = &bytes[DATASET_HEADER_BYTES..];
    let expected = count * record;
    if body.len() < expected {
        return Err(FormatError::Truncated(format!(
            "{count} frames need {expected} bytes, file has {}",
            body.len()
        ))
        .into());
    }
    if body.len() > expected {
        return Err(FormatError::LengthMismatch(format!(
            "{} bytes after {count} frames",
            body.len() - expected
        ))
        .into());
    }
    let mut d = Dataset::new(height, width, seed);
    for rec in body.chunks_exact(record) {
        let label = GestureLabel::from_id(rec[0]).ok_or(FormatError::BadLabel(rec[0]))?;
        let split = match rec[1] {
            0 => Split::Train,
            1 => Split::Test,
            s => return Err(FormatError::BadSplit(s).into()),
        };
        d.push(&rec[2..], label, split)?;
    }
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_dataset(d)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
