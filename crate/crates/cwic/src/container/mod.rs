//! Compressed-stream container and end-to-end orchestration.

mod ppm;
mod stream;

pub use ppm::{encode_ppm, parse_ppm, read_ppm, write_ppm, RawImage};
pub use stream::*;

use thiserror::Error;

use crate::entropy::EntropyError;
use crate::nets::ModelError;
use crate::quant::QuantError;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ppm format error: {0}")]
    PpmFormat(String),
    #[error("bad magic {found:?}, expected \"CWIC\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported stream version {0}")]
    BadVersion(u8),
    #[error("stream truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("stream has {extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error(
        "model checksum mismatch: stream was made with {stream:08x}, loaded model is {model:08x}"
    )]
    ModelChecksum { stream: u32, model: u32 },
    #[error("entropy-model checksum mismatch: stream {stream:08x}, loaded model {model:08x}")]
    EntropyChecksum { stream: u32, model: u32 },
    #[error("decoded bit count mismatch: expected {expected}, got {got}")]
    BitCountMismatch { expected: usize, got: usize },
    #[error("image has a zero dimension ({width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("stream geometry invalid: {0}")]
    BadGeometry(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

/// CRC-32 (IEEE 802.3, reflected 0xEDB88320), used to pin streams to the
/// exact model files that produced them.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}
