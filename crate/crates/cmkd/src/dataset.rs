//! Binary dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! "CMKD-DS" | version u16 | canvas u16 | count u32 | vocab_size u16
//! vocab_size x (len u8 | UTF-8 bytes)
//! count x (canvas*canvas*3 f32 | real_len u8 | 20 x u16 | packed mask bits)
//! ```
//!
//! Mask bits are row-major, most significant bit first, padded to a byte.

use std::fs;
use std::path::Path;

use cmkd_core::data::{ReferringSample, Vocabulary, MAX_TEXT_LEN, PAD};
use cmkd_core::Tensor;
use thiserror::Error;

use crate::bytes::{Reader, Truncated, Writer};

pub const MAGIC: &[u8; 7] = b"CMKD-DS";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("dataset header truncated")]
    TruncatedHeader,
    #[error("dataset record {index} truncated")]
    TruncatedRecord { index: usize },
    #[error("dataset vocabulary differs from the built-in one")]
    VocabularyMismatch,
    #[error("dataset record {index} is malformed: {reason}")]
    MalformedRecord { index: usize, reason: &'static str },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("cannot write an empty dataset")]
    Empty,
    #[error("samples have mixed canvas sizes")]
    MixedCanvas,
}

impl DatasetError {
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::BadMagic => "E_BAD_MAGIC",
            DatasetError::VersionMismatch { .. } => "E_VERSION_MISMATCH",
            DatasetError::TruncatedHeader | DatasetError::TruncatedRecord { .. } => "E_TRUNCATED",
            DatasetError::VocabularyMismatch => "E_VOCABULARY",
            DatasetError::MalformedRecord { .. } | DatasetError::TrailingBytes(_) => "E_MALFORMED",
            DatasetError::Empty | DatasetError::MixedCanvas => "E_INVALID_DATASET",
        }
    }
}

pub fn encode_dataset(samples: &[ReferringSample]) -> Result<Vec<u8>, DatasetError> {
    let first = samples.first().ok_or(DatasetError::Empty)?;
    let canvas = first.canvas();
    if samples.iter().any(|s| s.canvas() != canvas) {
        return Err(DatasetError::MixedCanvas);
    }
    let pixels = canvas * canvas;
    let mut w = Writer::with_capacity(32 + samples.len() * (pixels * 12 + 64));
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u16(canvas as u16);
    w.u32(samples.len() as u32);
    let tokens = Vocabulary.tokens();
    w.u16(tokens.len() as u16);
    for t in tokens {
        w.u8(t.len() as u8);
        w.bytes(t.as_bytes());
    }
    for s in samples {
        for &v in s.image.data() {
            w.f32(v);
        }
        w.u8(s.real_len);
        for &id in &s.token_ids {
            w.u16(id);
        }
        w.bytes(&pack_bits(&s.mask));
    }
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<ReferringSample>, DatasetError> {
    let mut r = Reader::new(bytes);
    let header = |_: Truncated| DatasetError::TruncatedHeader;
    let magic = r.take(MAGIC.len()).map_err(|_| DatasetError::BadMagic)?;
    if magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = r.u16().map_err(header)?;
    if version != VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let canvas = r.u16().map_err(header)? as usize;
    let count = r.u32().map_err(header)? as usize;
    let vocab_size = r.u16().map_err(header)? as usize;
    let mut vocab = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        let len = r.u8().map_err(header)? as usize;
        vocab.push(r.take(len).map_err(header)?.to_vec());
    }
    let builtin: Vec<Vec<u8>> = Vocabulary.tokens().iter().map(|t| t.as_bytes().to_vec()).collect();
    if vocab != builtin {
        return Err(DatasetError::VocabularyMismatch);
    }
    if canvas == 0 {
        return Err(DatasetError::MalformedRecord {
            index: 0,
            reason: "zero canvas",
        });
    }

    let pixels = canvas * canvas;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let trunc = |_: Truncated| DatasetError::TruncatedRecord { index };
        let mut image = Vec::with_capacity(pixels * 3);
        for _ in 0..pixels * 3 {
            image.push(r.f32().map_err(trunc)?);
        }
        let real_len = r.u8().map_err(trunc)?;
        let mut token_ids = [PAD; MAX_TEXT_LEN];
        for id in token_ids.iter_mut() {
            *id = r.u16().map_err(trunc)?;
        }
        let mask = unpack_bits(r.take(pixels.div_ceil(8)).map_err(trunc)?, pixels);
        let malformed = |reason| DatasetError::MalformedRecord { index, reason };
        if real_len as usize > MAX_TEXT_LEN {
            return Err(malformed("real_len exceeds the text limit"));
        }
        if token_ids.iter().any(|&id| id as usize >= vocab_size) {
            return Err(malformed("token id outside the vocabulary"));
        }
        let image = Tensor::new(&[canvas, canvas, 3], image).map_err(|_| malformed("image shape"))?;
        samples.push(ReferringSample {
            image,
            token_ids,
            real_len,
            mask,
        });
    }
    if r.remaining() != 0 {
        return Err(DatasetError::TrailingBytes(r.remaining()));
    }
    Ok(samples)
}

pub fn write_dataset(path: &Path, samples: &[ReferringSample]) -> Result<(), crate::CliError> {
    let bytes = encode_dataset(samples)?;
    fs::write(path, bytes).map_err(|e| crate::CliError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<ReferringSample>, crate::CliError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(crate::CliError::NoDataset(path.to_path_buf())),
        Err(e) => return Err(crate::CliError::io(path, e)),
    };
    Ok(decode_dataset(&bytes)?)
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_are_msb_first() {
        let bits = [true, false, false, false, false, false, false, true, true];
        assert_eq!(pack_bits(&bits), vec![0b1000_0001, 0b1000_0000]);
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }
}
