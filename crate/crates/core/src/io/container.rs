//! Raw video container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SVQV"
//! 4       1     version (1)
//! 5       4     frame count, u32 little-endian
//! 9       4     height, u32 LE
//! 13      4     width, u32 LE
//! 17      T·H·W·3  RGB bytes, row-major, frames consecutive
//! ```

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tokenizer::RawVideo;

pub const MAGIC: &[u8; 4] = b"SVQV";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;

pub fn encode_container(video: &RawVideo) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + video.pixels().len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [video.frame_count(), video.height(), video.width()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(video.pixels());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

pub fn decode_container(bytes: &[u8]) -> Result<RawVideo> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader.into());
    }
    if bytes[4] != VERSION {
        return Err(FormatError::Version {
            expected: VERSION as u32,
            found: bytes[4] as u32,
        }
        .into());
    }
    let (t, h, w) = (u32_at(bytes, 5), u32_at(bytes, 9), u32_at(bytes, 13));
    if t == 0 || h == 0 || w == 0 {
        return Err(FormatError::Header(format!("zero extent in {t}x{h}x{w}")).into());
    }
    let expected = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| FormatError::Header(format!("extents {t}x{h}x{w} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes {
            extra: payload.len() - expected,
        }
        .into());
    }
    RawVideo::new(t, h, w, payload.to_vec())
}

pub fn write_container(video: &RawVideo, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_container(video)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<RawVideo> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}
