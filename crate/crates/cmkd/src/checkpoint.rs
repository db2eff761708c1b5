//! Binary checkpoints: parameters, AdamW moments and the shuffle stream.
//!
//! Little-endian layout:
//!
//! ```text
//! "CMKD-CK" | version u16 | fingerprint [u8; 32]
//! count u32 | count x tensor                      parameters
//! count u32 | count x tensor | step u64           optimiser moments
//! rng [u8; 16]
//!
//! tensor := name_len u16 | name | rank u8 | rank x u32 | dtype u8 | payload
//! ```
//!
//! Moment tensors are named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use cmkd_core::optim::AdamState;
use cmkd_core::rng::CounterRng;
use cmkd_core::segmenter::{EncoderConfig, ModelOptions, Segmenter};
use cmkd_core::tensor::{DType, Real, Tensor};
use cmkd_core::train::TrainState;
use thiserror::Error;

use crate::bytes::{Reader, Truncated, Writer};

pub const MAGIC: &[u8; 7] = b"CMKD-CK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint was written for a different configuration")]
    FingerprintMismatch,
    #[error("checkpoint truncated in record {index}")]
    TruncatedRecord { index: usize },
    #[error("checkpoint record {index} is malformed: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("tensor `{name}` has dtype {found:?}, expected {expected:?}")]
    DTypeMismatch { name: String, found: DType, expected: DType },
    #[error("checkpoint does not match the model: {0}")]
    LayoutMismatch(String),
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "E_BAD_MAGIC",
            CheckpointError::VersionMismatch { .. } => "E_VERSION_MISMATCH",
            CheckpointError::FingerprintMismatch => "E_FINGERPRINT_MISMATCH",
            CheckpointError::TruncatedRecord { .. } => "E_TRUNCATED",
            CheckpointError::MalformedRecord { .. } => "E_MALFORMED",
            CheckpointError::DTypeMismatch { .. } => "E_DTYPE_MISMATCH",
            CheckpointError::LayoutMismatch(_) => "E_LAYOUT_MISMATCH",
        }
    }
}

/// A decoded checkpoint, before it is bound to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<R> {
    pub fingerprint: [u8; 32],
    pub params: Vec<(String, Tensor<R>)>,
    pub moments: Vec<(String, Tensor<R>)>,
    pub step: u64,
    pub rng: CounterRng,
}

impl<R: Real> Checkpoint<R> {
    pub fn from_state(state: &TrainState<R>, fingerprint: [u8; 32]) -> Self {
        let params = state.model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let mut moments = Vec::with_capacity(2 * state.opt.m.len());
        for (p, m) in state.model.params.iter().zip(&state.opt.m) {
            moments.push((format!("adam.m.{}", p.name), m.clone()));
        }
        for (p, v) in state.model.params.iter().zip(&state.opt.v) {
            moments.push((format!("adam.v.{}", p.name), v.clone()));
        }
        Checkpoint {
            fingerprint,
            params,
            moments,
            step: state.opt.step,
            rng: state.rng,
        }
    }

    /// Rebuilds the training state for `cfg`, matching tensors by name.
    pub fn into_state(self, cfg: &EncoderConfig, options: ModelOptions) -> Result<TrainState<R>, crate::CliError> {
        let mut model = Segmenter::<R>::new(cfg.clone(), options, 0)?;
        if self.params.len() != model.params.len() {
            return Err(CheckpointError::LayoutMismatch(format!(
                "{} tensors in file, model has {}",
                self.params.len(),
                model.params.len()
            ))
            .into());
        }
        let mut opt = AdamState::new(&model.params);
        let n = model.params.len();
        if self.moments.len() != 2 * n {
            return Err(CheckpointError::LayoutMismatch("optimiser table size".into()).into());
        }
        for (name, value) in self.params {
            let id = model
                .params
                .by_name(&name)
                .ok_or_else(|| CheckpointError::LayoutMismatch(format!("unknown tensor `{name}`")))?;
            let slot = &mut model.params.get_mut(id).value;
            if slot.shape() != value.shape() {
                return Err(CheckpointError::LayoutMismatch(format!("shape of `{name}`")).into());
            }
            *slot = value;
        }
        for (name, value) in self.moments {
            let (table, param) = if let Some(p) = name.strip_prefix("adam.m.") {
                (&mut opt.m, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (&mut opt.v, p)
            } else {
                return Err(CheckpointError::LayoutMismatch(format!("unknown optimiser entry `{name}`")).into());
            };
            let id = model
                .params
                .by_name(param)
                .ok_or_else(|| CheckpointError::LayoutMismatch(format!("unknown optimiser entry `{name}`")))?;
            if table[id.0].shape() != value.shape() {
                return Err(CheckpointError::LayoutMismatch(format!("shape of `{name}`")).into());
            }
            table[id.0] = value;
        }
        opt.step = self.step;
        Ok(TrainState { model, opt, rng: self.rng })
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.params.iter().chain(&self.moments).map(|(_, t)| t.len()).sum();
        let mut w = Writer::with_capacity(64 + payload * R::DTYPE.size());
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.bytes(&self.fingerprint);
        write_table(&mut w, &self.params);
        write_table(&mut w, &self.moments);
        w.u64(self.step);
        w.bytes(&self.rng.to_bytes());
        w.into_inner()
    }

    /// Decodes a file, rejecting it unless its fingerprint equals `expected`.
    pub fn decode(bytes: &[u8], expected: &[u8; 32]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let head = |_: Truncated| CheckpointError::TruncatedRecord { index: 0 };
        let version = r.u16().map_err(head)?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let fingerprint: [u8; 32] = r.take(32).map_err(head)?.try_into().expect("32 bytes");
        if &fingerprint != expected {
            return Err(CheckpointError::FingerprintMismatch);
        }
        let mut index = 0;
        let params = read_table(&mut r, &mut index)?;
        let moments = read_table(&mut r, &mut index)?;
        let tail = |_: Truncated| CheckpointError::TruncatedRecord { index };
        let step = r.u64().map_err(tail)?;
        let rng = CounterRng::from_bytes(r.take(16).map_err(tail)?.try_into().expect("16 bytes"));
        if r.remaining() != 0 {
            return Err(CheckpointError::MalformedRecord {
                index,
                reason: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Checkpoint {
            fingerprint,
            params,
            moments,
            step,
            rng,
        })
    }
}

fn write_table<R: Real>(w: &mut Writer, table: &[(String, Tensor<R>)]) {
    w.u32(table.len() as u32);
    for (name, t) in table {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u8(t.rank() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.u8(R::DTYPE.code());
        match R::DTYPE {
            DType::F32 => t.data().iter().for_each(|v| w.f32(v.to_f64() as f32)),
            DType::F64 => t.data().iter().for_each(|v| w.f64(v.to_f64())),
        }
    }
}

/// Reads one table; `index` counts records across tables for error reports.
fn read_table<R: Real>(r: &mut Reader<'_>, index: &mut usize) -> Result<Vec<(String, Tensor<R>)>, CheckpointError> {
    let count = r.u32().map_err(|_| CheckpointError::TruncatedRecord { index: *index })? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let i = *index;
        let trunc = |_: Truncated| CheckpointError::TruncatedRecord { index: i };
        let malformed = |reason: &str| CheckpointError::MalformedRecord {
            index: i,
            reason: reason.to_string(),
        };
        let name_len = r.u16().map_err(trunc)? as usize;
        let name = std::str::from_utf8(r.take(name_len).map_err(trunc)?)
            .map_err(|_| malformed("name is not UTF-8"))?
            .to_string();
        let rank = r.u8().map_err(trunc)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().map_err(trunc)? as usize);
        }
        let code = r.u8().map_err(trunc)?;
        let dtype = DType::from_code(code).ok_or_else(|| malformed("unknown dtype"))?;
        if dtype != R::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                name,
                found: dtype,
                expected: R::DTYPE,
            });
        }
        let len: usize = shape.iter().product();
        if r.remaining() < len.saturating_mul(dtype.size()) {
            return Err(CheckpointError::TruncatedRecord { index: i });
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let v = match dtype {
                DType::F32 => r.f32().map_err(trunc)? as f64,
                DType::F64 => r.f64().map_err(trunc)?,
            };
            data.push(R::from_f64(v));
        }
        let tensor = Tensor::new(&shape, data).map_err(|e| malformed(&e.to_string()))?;
        out.push((name, tensor));
        *index += 1;
    }
    Ok(out)
}

pub fn save_checkpoint<R: Real>(path: &Path, state: &TrainState<R>, fingerprint: [u8; 32]) -> Result<(), crate::CliError> {
    let bytes = Checkpoint::from_state(state, fingerprint).encode();
    fs::write(path, bytes).map_err(|e| crate::CliError::io(path, e))
}

pub fn load_checkpoint<R: Real>(
    path: &Path,
    fingerprint: &[u8; 32],
    cfg: &EncoderConfig,
    options: ModelOptions,
) -> Result<TrainState<R>, crate::CliError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(crate::CliError::NoCheckpoint(path.to_path_buf())),
        Err(e) => return Err(crate::CliError::io(path, e)),
    };
    Checkpoint::<R>::decode(&bytes, fingerprint)?.into_state(cfg, options)
}
